"""Config-driven experiments.

The runner reads a flat ``section.key=value`` config, validates every key
and path up front, and then runs distill -> train -> evaluate with derived
seeds. The same flow is available from the shell as
``python -m trustdd distill|eval|ablate|forge|export-grid|report``.
"""
from pathlib import Path

from trustdd import runner

CONFIG = """
experiment.runs=2
experiment.output=demo-out/runner
data.count=400
data.test_count=200
outliers.count=400
distill.iterations=20
distill.outlier_count=10
distill.lr_img=1e-4
network.width=32
eval.models_per_run=2
eval.epochs=100
eval.ood_count=200
eval.scores=msp,energy
"""


def main():
    cfg = runner.parse_config(CONFIG)
    print(f"config checksum {cfg.checksum[:16]}...")

    poe_dirs = runner.cmd_distill(cfg)
    base_dirs = runner.cmd_distill(cfg.with_values(outliers__mode="none"), cfg.output / "baseline")
    print("distilled:", *poe_dirs, *base_dirs)

    runner.cmd_eval(cfg, [("baseline", cfg.output / "baseline"), ("poe", cfg.output / "distilled")])
    print((cfg.output / "report" / "table_msp.txt").read_text())

    reports, failures = runner.cmd_ablate(cfg.with_values(ablate__values=("0", "10")), "s-out-size")
    print(runner.summary_text(reports, ["msp"]))
    if failures:
        print("failed arms:", failures)
    print(Path(cfg.output / "ablate-s-out-size" / "summary.txt"))


if __name__ == "__main__":
    main()
