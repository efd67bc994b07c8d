"""Pseudo-outliers from in-distribution digits.

Each outlier is one training image with one corruption applied: jigsaw,
invert, mosaic, speckle, or a digit flip that skips the symmetric classes.
The script prints how the corruptions were spread and writes a preview
grid (one row per corruption) as a PGM file.
"""
from collections import Counter
from pathlib import Path

import numpy as np

from trustdd import CorruptionConfig, load_dataset, synthesize_outliers
from trustdd.runner import to_bytes

OUT = Path("demo-out")


def main():
    digits = load_dataset("digits", "train")
    print(f"in-distribution: {len(digits)} images of shape {digits.shape}")

    cfg = CorruptionConfig(enabled=("jigsaw", "invert", "mosaic", "speckle", "flip"), digits=True, rng_seed=0)
    outliers = synthesize_outliers(digits, cfg, 500)
    for tag, n in sorted(Counter(outliers.tags).items()):
        print(f"  {tag:8s} {n}")

    # 8 examples per corruption, 1-pixel white gutters
    h, w = digits.shape[1:]
    rows = []
    for tag in cfg.enabled:
        idx = [i for i, t in enumerate(outliers.tags) if t == tag][:8]
        tiles = [np.pad(to_bytes(outliers.images[i, 0]), ((0, 1), (0, 1)), constant_values=255) for i in idx]
        rows.append(np.concatenate(tiles, axis=1))
    grid = np.concatenate(rows, axis=0)
    OUT.mkdir(exist_ok=True)
    path = OUT / "pseudo_outliers.pgm"
    path.write_bytes(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode() + grid.tobytes())
    print(f"preview written to {path}")


if __name__ == "__main__":
    main()
