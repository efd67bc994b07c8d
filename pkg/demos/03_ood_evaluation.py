"""Does the outlier-aware distilled set help OOD detection?

Loads the two sets written by 02_distill_blobs.py, trains a few networks
on each and scores held-out blob shapes the networks never saw (a centred
bump, two bumps, a bar and a ring) with MSP, max logit and energy.
"""
from pathlib import Path

from trustdd import NetworkSpec, evaluate_protocol, load_distilled, make_blob_outliers, make_blobs
from trustdd.augment import DSA_POLICY
from trustdd.data import BLOB_OOD_KINDS, UnlabeledImageSet
from trustdd.ood import format_table

OUT = Path("demo-out")


def main():
    test = make_blobs(classes=2, count=500, size=8, seed=99, name="blobs-test")
    oods = [UnlabeledImageSet(make_blob_outliers(k, 500, 8, seed=50 + i).images, f"blobs-{k}")
            for i, k in enumerate(BLOB_OOD_KINDS)]
    spec = NetworkSpec(2, test.shape, depth=3, width=64)

    reports = {}
    for arm in ("baseline", "poe"):
        path = OUT / arm / "distilled"
        if not path.exists():
            raise SystemExit(f"{path} not found; run 02_distill_blobs.py first")
        s = load_distilled(path)
        lam = s.extra.get("lambda", 0.0)
        reports[arm] = evaluate_protocol([s], spec, test, oods, models_per_run=3, rng_seed=0,
                                         hyper={"lam": lam, "augmentation": DSA_POLICY})
    for score in ("msp", "energy"):
        print(format_table(reports, score))


if __name__ == "__main__":
    main()
