"""Distilling a toy dataset with and without outliers.

Two classes of Gaussian bumps on an 8x8 grid are condensed to 10 images
per class by gradient matching. The outlier-aware run also learns 20
outlier images, initialized from corrupted training images, that push
the network towards uniform predictions.
"""
from pathlib import Path

from trustdd import (
    CorruptionConfig,
    DistillConfig,
    NetworkSpec,
    make_blobs,
    run_trustdd,
    save_distilled,
    synthesize_outliers,
)
from trustdd.runner import cmd_export_grid

OUT = Path("demo-out")
ITERATIONS = 60


def main():
    train = make_blobs(classes=2, count=1000, size=8, seed=0)
    pool = synthesize_outliers(train, CorruptionConfig(rng_seed=1), 1000)
    spec = NetworkSpec(2, train.shape, depth=3, width=64)

    arms = {
        "baseline": (None, DistillConfig(iterations=ITERATIONS, ipc=10, lam=0.0, lr_img=1e-4)),
        "poe": (pool, DistillConfig(iterations=ITERATIONS, ipc=10, outlier_count=20, lam=0.5, lr_img=1e-4)),
    }
    for name, (t_out, cfg) in arms.items():
        s = run_trustdd(train, t_out, cfg, spec, telemetry_path=OUT / name / "telemetry.csv")
        losses = s.telemetry.losses()
        print(f"{name:8s} |s_in|={len(s.s_in_images)} |s_out|={len(s.s_out_images)} "
              f"loss first/last {losses[0]:.2f}/{losses[-1]:.2f}")
        if s.corruption_assignment:
            print(f"         outlier rows by corruption: {sorted(set(s.corruption_assignment))}")
        path = save_distilled(s, OUT / name / "distilled")
        grid = cmd_export_grid(path, OUT / f"{name}_grid.pgm")
        print(f"         saved {path}, grid {grid}")


if __name__ == "__main__":
    main()
