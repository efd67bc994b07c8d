"""Trajectory matching: distill against recorded expert training runs.

Experts are trained on the real data with the integrated loss and saved as
parameter snapshots. Distillation then starts a student at a random
snapshot, trains it a few steps on the distilled images, and moves the
images so the student lands near the expert's later snapshot.
"""
from pathlib import Path

from trustdd import (
    CorruptionConfig,
    DistillConfig,
    NetworkSpec,
    expert_trajectories,
    make_blobs,
    run_trustdd,
    synthesize_outliers,
)
from trustdd.networks import load_trajectory, save_trajectory

OUT = Path("demo-out")


def main():
    train = make_blobs(classes=2, count=400, size=8, seed=0)
    pool = synthesize_outliers(train, CorruptionConfig(rng_seed=1), 400)
    spec = NetworkSpec(2, train.shape, depth=2, width=32)

    buffer = expert_trajectories(train, pool, spec, {"epochs": 6, "batch": 50, "snapshot_interval": 4},
                                 rng_seed=0)
    save_trajectory(buffer, OUT / "experts")
    buffer = load_trajectory(OUT / "experts")
    print(f"expert snapshots at steps {buffer.steps}")

    cfg = DistillConfig(method="mtt", iterations=40, ipc=5, outlier_count=8, net_steps=3, expert_segment=8,
                        lr_img=1.0, lr_net=0.01)
    s = run_trustdd(train, pool, cfg, spec, buffer=buffer)
    losses = s.telemetry.losses()
    n = max(1, len(losses) // 10)
    print(f"normalized parameter distance, first/last tenth: {losses[:n].mean():.3f} -> {losses[-n:].mean():.3f}")


if __name__ == "__main__":
    main()
