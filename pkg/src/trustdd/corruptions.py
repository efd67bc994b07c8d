"""Semantic-shifting corruptions that turn InD images into pseudo-outliers.

Every transform maps a single ``(C, H, W)`` image in [0, 1] to another image
in [0, 1]. Randomness always comes from a caller-supplied
``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import UnlabeledImageSet
from .errors import ConfigError, CorruptionError

CORRUPTIONS = ("jigsaw", "invert", "mosaic", "speckle", "flip")
DEFAULT_GRIDS = ((2, 3), (3, 2), (2, 4), (4, 2))
HFLIP_EXCLUDED = frozenset({0, 1, 8})
VFLIP_EXCLUDED = frozenset({0, 1, 3, 8})


@dataclass(frozen=True)
class CorruptionConfig:
    enabled: tuple = ("jigsaw", "invert", "mosaic", "speckle")
    jigsaw_grids: tuple = DEFAULT_GRIDS
    mosaic_block_range: tuple | None = None
    speckle_noise: str = "uniform01"
    flip_h_excluded_labels: frozenset = HFLIP_EXCLUDED
    flip_v_excluded_labels: frozenset = VFLIP_EXCLUDED
    digits: bool = False
    rng_seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "enabled", tuple(self.enabled))
        unknown = set(self.enabled) - set(CORRUPTIONS)
        if unknown:
            raise ConfigError(f"unknown corruptions {sorted(unknown)}")
        for rows, cols in self.jigsaw_grids:
            if rows * cols not in (6, 8):
                raise ConfigError(f"jigsaw grid {rows}x{cols} does not give 6 or 8 patches")
        if self.speckle_noise not in ("uniform01", "gaussian"):
            raise ConfigError(f"unknown speckle noise {self.speckle_noise!r}")

    def applicable(self):
        return tuple(c for c in self.enabled if c != "flip" or self.digits)


def _as_image(image):
    image = np.asarray(image)
    if image.ndim != 3:
        raise CorruptionError(f"expected a (C, H, W) image, got shape {image.shape}")
    return image


def jigsaw(image, rng, grids=DEFAULT_GRIDS, grid=None, perm=None):
    """Cut the image into a rows x cols grid and shuffle the patches.

    The largest centred region divisible by the grid is shuffled and pasted
    back; the border strip outside it is left untouched.
    """
    image = _as_image(image)
    _, h, w = image.shape
    if grid is None:
        feasible = [g for g in grids if g[0] <= h and g[1] <= w]
        if not feasible:
            raise CorruptionError(f"image {h}x{w} is smaller than every jigsaw grid")
        grid = feasible[rng.integers(len(feasible))]
    rows, cols = grid
    if rows > h or cols > w:
        raise CorruptionError(f"image {h}x{w} is smaller than jigsaw grid {rows}x{cols}")
    n = rows * cols
    if perm is None:
        perm = rng.permutation(n)
        while np.array_equal(perm, np.arange(n)):
            perm = rng.permutation(n)
    perm = np.asarray(perm)
    ph, pw = h // rows, w // cols
    top, left = (h - ph * rows) // 2, (w - pw * cols) // 2
    region = image[:, top:top + ph * rows, left:left + pw * cols]
    # (C, rows, ph, cols, pw) -> (rows*cols, C, ph, pw)
    patches = region.reshape(-1, rows, ph, cols, pw).transpose(1, 3, 0, 2, 4).reshape(n, -1, ph, pw)
    shuffled = patches[perm].reshape(rows, cols, -1, ph, pw).transpose(2, 0, 3, 1, 4)
    out = image.copy()
    out[:, top:top + ph * rows, left:left + pw * cols] = shuffled.reshape(-1, ph * rows, pw * cols)
    return out


def draw_invert_channels(num_channels, rng):
    """Uniform draw over the 2**C - 1 non-empty channel subsets."""
    mask = int(rng.integers(1, 2 ** num_channels))
    return tuple(c for c in range(num_channels) if mask >> c & 1)


def invert(image, rng, channels=None):
    image = _as_image(image)
    if channels is None:
        channels = draw_invert_channels(image.shape[0], rng)
    out = image.copy()
    idx = list(channels)
    out[idx] = 1.0 - image[idx]
    return out


def default_block_range(h, w):
    side = min(h, w)
    lo = max(2, side // 8)
    return lo, max(lo, side // 4)


def mosaic(image, rng, block_range=None, block=None):
    """Replace each b x b block by its mean; edge blocks average their actual extent."""
    image = _as_image(image)
    _, h, w = image.shape
    if block is None:
        lo, hi = block_range or default_block_range(h, w)
        block = int(rng.integers(lo, hi + 1))
    if block > h and block > w:
        raise CorruptionError(f"mosaic block {block} exceeds image {h}x{w}")
    out = np.empty_like(image)
    for y in range(0, h, block):
        for x in range(0, w, block):
            cell = image[:, y:y + block, x:x + block]
            out[:, y:y + block, x:x + block] = cell.mean(axis=(1, 2), keepdims=True)
    return np.clip(out, 0.0, 1.0)


def speckle(image, rng, noise="uniform01"):
    """``clip(x + x * U, 0, 1)`` with ``U ~ Uniform[0, 1)`` by default."""
    image = _as_image(image)
    if noise == "uniform01":
        u = rng.random(image.shape)
    elif noise == "gaussian":
        u = rng.normal(0.0, 1.0, image.shape)
    else:
        raise ConfigError(f"unknown speckle noise {noise!r}")
    return np.clip(image + image * u, 0.0, 1.0).astype(image.dtype, copy=False)


def flip_digit(image, label, rng, digits=True, orientation=None,
               h_excluded=HFLIP_EXCLUDED, v_excluded=VFLIP_EXCLUDED):
    """Flip a digit image, or return None if the flip keeps its meaning.

    Horizontal flips skip ``{0, 1, 8}``; vertical flips skip ``{0, 1, 3, 8}``.
    """
    if not digits:
        raise ConfigError("flip is only a semantic shift for digit datasets")
    image = _as_image(image)
    if orientation is None:
        orientation = "horizontal" if rng.random() < 0.5 else "vertical"
    if orientation == "horizontal":
        return None if int(label) in h_excluded else image[:, :, ::-1].copy()
    if orientation == "vertical":
        return None if int(label) in v_excluded else image[:, ::-1, :].copy()
    raise ConfigError(f"unknown flip orientation {orientation!r}")


def apply_corruption(name, image, label, rng, cfg):
    if name == "jigsaw":
        return jigsaw(image, rng, cfg.jigsaw_grids)
    if name == "invert":
        return invert(image, rng)
    if name == "mosaic":
        return mosaic(image, rng, cfg.mosaic_block_range)
    if name == "speckle":
        return speckle(image, rng, cfg.speckle_noise)
    if name == "flip":
        return flip_digit(image, label, rng, cfg.digits, h_excluded=cfg.flip_h_excluded_labels,
                          v_excluded=cfg.flip_v_excluded_labels)
    raise ConfigError(f"unknown corruption {name!r}")


def synthesize_outliers(t_in, cfg, count, max_resample=1000):
    """Corrupt randomly chosen InD images into ``count`` tagged pseudo-outliers.

    Item ``i`` draws from its own generator seeded ``cfg.rng_seed + i``, so
    batches can be produced in parallel and still match serial output.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if len(t_in) == 0:
        raise ConfigError("cannot corrupt an empty dataset")
    choices = cfg.applicable()
    if not choices:
        raise ConfigError(f"no applicable corruption among {cfg.enabled} (digits={cfg.digits})")
    if "flip" in choices:
        labels = set(np.unique(t_in.labels).tolist())
        if labels <= (set(cfg.flip_h_excluded_labels) & set(cfg.flip_v_excluded_labels)):
            raise ConfigError("flip cannot shift the semantics of any label in this dataset")
    images = np.empty((count, *t_in.shape), dtype=np.float32)
    tags = []
    for i in range(count):
        rng = np.random.default_rng(cfg.rng_seed + i)
        name = choices[rng.integers(len(choices))]
        for _ in range(max_resample):
            src = rng.integers(len(t_in))
            out = apply_corruption(name, t_in.images[src], t_in.labels[src], rng, cfg)
            if out is not None:
                break
        else:
            raise CorruptionError(f"{name}: no applicable source image after {max_resample} draws")
        images[i] = out
        tags.append(name)
    return UnlabeledImageSet(images, name=f"poe-{t_in.name}", provenance="pseudo-corruption",
                             tags=tuple(tags))


def noise_outliers(kind, shape, count, rng_seed):
    """Gaussian (mean 0.5, sd 0.5, clipped) or uniform [0, 1] noise images."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    size = (count, *shape)
    if kind == "gaussian":
        images = np.clip(0.5 + 0.5 * rng.standard_normal(size), 0.0, 1.0)
    elif kind == "uniform":
        images = rng.random(size)
    else:
        raise ConfigError(f"unknown noise kind {kind!r}")
    return UnlabeledImageSet(images.astype(np.float32), name=f"noise-{kind}", provenance=f"noise-{kind}")
