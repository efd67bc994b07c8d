"""OOD scores and threshold-free metrics on hand-made logits.

Confident logits on the in-distribution side, flatter logits on the
outlier side. Every score treats larger values as more in-distribution.
"""
import numpy as np

from trustdd import energy_score, mls_score, msp_score
from trustdd.ood import ScoreSet, all_metrics


def main():
    rng = np.random.default_rng(0)
    logits_in = rng.normal(size=(1000, 10))
    logits_in[np.arange(1000), rng.integers(10, size=1000)] += 4.0
    logits_out = rng.normal(size=(1000, 10)) * 1.5

    for name, fn in (("msp", msp_score), ("mls", mls_score), ("energy", energy_score)):
        metrics = all_metrics(ScoreSet(fn(logits_in), fn(logits_out), name))
        print(f"{name:7s} " + "  ".join(f"{k}={100 * v:6.2f}" for k, v in metrics.items()))


if __name__ == "__main__":
    main()
