"""Datasets, distilled-set initialization and on-disk containers.

All images live in the [0, 1] pixel domain as float arrays shaped
``(count, channels, height, width)``.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    IncompatibleFormatError,
    InitializationError,
    LoadError,
    ValidationError,
)

FORMAT_VERSION = 1

OUTLIER_PROVENANCES = ("pseudo-corruption", "noise-gaussian", "noise-uniform", "external-directory")
DISTILL_METHODS = ("dsa", "mtt", "single-set-dsa")
OUTLIER_MODES = ("none", "oe", "poe")


def _check_images(images, what):
    if images.ndim != 4:
        raise ValidationError(f"{what}: expected a 4-D array, got shape {images.shape}")
    if images.size and (not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0):
        raise ValidationError(f"{what}: pixel values must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "unnamed"

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        _check_images(images, self.name)
        if self.num_classes < 1:
            raise ValidationError(f"{self.name}: num_classes must be positive")
        if labels.shape != (len(images),):
            raise ValidationError(
                f"{self.name}: {len(labels)} labels for {len(images)} images"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError(f"{self.name}: label outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def class_indices(self, c):
        return np.flatnonzero(self.labels == c)


@dataclass(frozen=True, eq=False)
class UnlabeledImageSet:
    images: np.ndarray
    name: str = "outliers"
    provenance: str = "external-directory"
    tags: tuple | None = None

    def __post_init__(self):
        images = np.asarray(self.images)
        object.__setattr__(self, "images", images)
        _check_images(images, self.name)
        if self.provenance not in OUTLIER_PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        if self.tags is not None:
            tags = tuple(str(t) for t in self.tags)
            if len(tags) != len(images):
                raise ValidationError(f"{self.name}: {len(tags)} tags for {len(images)} images")
            object.__setattr__(self, "tags", tags)

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])


def empty_outliers(shape, name="none"):
    return UnlabeledImageSet(np.zeros((0, *shape), dtype=np.float32), name=name,
                             provenance="external-directory")


@dataclass(eq=False)
class DistilledSet:
    """The learnable condensed dataset ``S = S_in + S_out``.

    ``s_in_labels`` is fixed at initialization; only the two image arrays
    are ever optimized.
    """

    s_in_images: np.ndarray
    s_in_labels: np.ndarray
    s_out_images: np.ndarray
    ipc: int
    num_classes: int
    method: str = "dsa"
    outlier_mode: str = "none"
    rng_seed: int = 0
    corruption_assignment: list | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s_in_labels = np.asarray(self.s_in_labels, dtype=np.int32)
        self.validate()

    def validate(self):
        if self.method not in DISTILL_METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.outlier_mode not in OUTLIER_MODES:
            raise ValidationError(f"unknown outlier_mode {self.outlier_mode!r}")
        n_in = len(self.s_in_images)
        if n_in != self.num_classes * self.ipc:
            raise ValidationError(f"|s_in|={n_in} != num_classes*ipc={self.num_classes * self.ipc}")
        hist = np.bincount(self.s_in_labels, minlength=self.num_classes)
        if len(hist) != self.num_classes or np.any(hist != self.ipc):
            raise ValidationError("s_in labels are not balanced at ipc per class")
        if self.s_out_images.ndim != 4 or self.s_out_images.shape[1:] != self.s_in_images.shape[1:]:
            raise ValidationError("s_out shape does not match s_in shape")
        if self.outlier_mode == "none" and len(self.s_out_images):
            raise ValidationError("outlier_mode 'none' requires an empty s_out")
        if self.corruption_assignment is not None and len(self.corruption_assignment) != len(self.s_out_images):
            raise ValidationError("corruption_assignment length differs from |s_out|")

    @property
    def shape(self):
        return tuple(self.s_in_images.shape[1:])

    def __len__(self):
        return len(self.s_in_images) + len(self.s_out_images)


# ---------------------------------------------------------------------------
# Synthetic blobs

def blob_centers(num_classes, size):
    """Class-dependent bump centres, evenly spaced on a circle."""
    mid = (size - 1) / 2.0
    radius = 0.3 * size
    angles = 2 * np.pi * np.arange(num_classes) / num_classes + np.pi / 4
    return np.stack([mid + radius * np.sin(angles), mid + radius * np.cos(angles)], axis=1)


def _gaussian_bump(size, cy, cx, sigma):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def make_blobs(classes=2, count=512, size=8, channels=1, seed=0, noise=0.03, name="blobs"):
    """Gaussian bumps at class-dependent positions on a ``size x size`` grid.

    Labels cycle ``0, 1, ..., classes-1`` so every prefix is near balanced.
    """
    if classes < 1 or size < 2 or count < 0:
        raise ValidationError("blobs need classes >= 1, size >= 2 and count >= 0")
    rng = np.random.default_rng(seed)
    centers = blob_centers(classes, size)
    labels = np.arange(count) % classes
    images = np.zeros((count, channels, size, size), dtype=np.float32)
    for i, y in enumerate(labels):
        cy, cx = centers[y] + rng.uniform(-0.08, 0.08, 2) * size
        sigma = rng.uniform(0.10, 0.14) * size
        amp = rng.uniform(0.7, 1.0)
        bump = amp * _gaussian_bump(size, cy, cx, sigma)
        for ch in range(channels):
            images[i, ch] = bump + rng.normal(0.0, noise, (size, size))
    np.clip(images, 0.0, 1.0, out=images)
    return LabeledImageSet(images, labels, classes, name=name)


BLOB_OOD_KINDS = ("center", "pair", "bar", "ring")


def make_blob_outliers(kind, count=256, size=8, channels=1, seed=0, noise=0.03):
    """Structurally distinct blob-like images for use as test OOD sets.

    ``center`` is a single bump at the image centre, ``pair`` two bumps at
    random places, ``bar`` an elongated stroke and ``ring`` an annulus.
    """
    if kind not in BLOB_OOD_KINDS:
        raise ValidationError(f"unknown blob outlier kind {kind!r}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    mid = (size - 1) / 2.0
    images = np.zeros((count, channels, size, size), dtype=np.float32)
    for i in range(count):
        amp = rng.uniform(0.7, 1.0)
        if kind == "center":
            cy, cx = mid + rng.uniform(-0.06, 0.06, 2) * size
            img = _gaussian_bump(size, cy, cx, rng.uniform(0.10, 0.14) * size)
        elif kind == "pair":
            img = np.zeros((size, size))
            for _ in range(2):
                cy, cx = rng.uniform(0.15, 0.85, 2) * (size - 1)
                img = np.maximum(img, _gaussian_bump(size, cy, cx, rng.uniform(0.08, 0.12) * size))
        elif kind == "bar":
            theta = rng.uniform(0, np.pi)
            off = rng.uniform(-0.1, 0.1) * size
            dist = np.abs((yy - mid) * np.cos(theta) - (xx - mid) * np.sin(theta) - off)
            img = np.exp(-dist ** 2 / (2 * (0.08 * size) ** 2))
        else:
            r0 = rng.uniform(0.22, 0.32) * size
            dist = np.hypot(yy - mid, xx - mid)
            img = np.exp(-(dist - r0) ** 2 / (2 * (0.07 * size) ** 2))
        for ch in range(channels):
            images[i, ch] = amp * img + rng.normal(0.0, noise, (size, size))
    np.clip(images, 0.0, 1.0, out=images)
    return UnlabeledImageSet(images, name=f"blobs-{kind}", provenance="external-directory")


# ---------------------------------------------------------------------------
# MNIST-format (IDX) reader

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read IDX file {path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise LoadError(f"{path}: not an IDX file")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LoadError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise LoadError(f"{path}: expected {expected} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array in IDX layout (used for fixtures and exports)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _find_idx(directory, stem):
    for suffix in ("", ".gz"):
        for name in (stem, stem.replace("-idx", ".idx")):
            p = directory / f"{name}{suffix}"
            if p.exists():
                return p
    raise LoadError(f"{directory}: missing {stem}[.gz]")


def load_mnist_dir(directory, split="train", name="mnist"):
    directory = Path(directory)
    if not directory.is_dir():
        raise LoadError(f"MNIST directory {directory} does not exist")
    prefix = "train" if split == "train" else "t10k"
    images = read_idx(_find_idx(directory, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx(_find_idx(directory, f"{prefix}-labels-idx1-ubyte"))
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ValidationError(f"{directory}: image/label files disagree ({images.shape} vs {labels.shape})")
    images = (images.astype(np.float32) / 255.0)[:, None]
    return LabeledImageSet(images, labels.astype(np.int64), 10, name=f"{name}-{split}")


def load_sklearn_digits(split="train", test_fraction=0.25, seed=0):
    """The 8x8 handwritten digits bundled with scikit-learn."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = (bunch.images / 16.0).astype(np.float32)[:, None]
    order = np.random.default_rng(seed).permutation(len(images))
    n_test = int(round(test_fraction * len(images)))
    idx = np.sort(order[:n_test] if split == "test" else order[n_test:])
    return LabeledImageSet(images[idx], bunch.target[idx], 10, name=f"digits-{split}")


def load_dataset(source, split="train", **options):
    """Load a labeled dataset by builtin name or from a directory.

    Builtins: ``"blobs"`` (options forwarded to :func:`make_blobs`; the
    test split uses a shifted seed) and ``"digits"``. Anything else is
    treated as a directory holding MNIST IDX files.
    """
    if split not in ("train", "test"):
        raise ValidationError(f"split must be 'train' or 'test', got {split!r}")
    if isinstance(source, dict):
        options = {**source, **options}
        source = options.pop("name")
    if source == "blobs":
        seed = options.pop("seed", 0) + (0 if split == "train" else 7919)
        return make_blobs(seed=seed, name=f"blobs-{split}", **options)
    if source == "digits":
        return load_sklearn_digits(split, **options)
    return load_mnist_dir(source, split, **options)


def resize_images(images, height, width):
    """Bilinear resize of a 4-D [0,1] array (used to match OOD sets to InD size)."""
    import torch
    import torch.nn.functional as F

    if images.shape[2:] == (height, width):
        return images
    out = F.interpolate(torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)),
                        size=(height, width), mode="bilinear", align_corners=False)
    return out.clamp_(0.0, 1.0).numpy()


def match_channels(images, channels):
    if images.shape[1] == channels:
        return images
    if channels == 1:
        return images.mean(axis=1, keepdims=True)
    if images.shape[1] == 1:
        return np.repeat(images, channels, axis=1)
    raise ValidationError(f"cannot map {images.shape[1]} channels to {channels}")


def load_image_directory(directory, shape, name=None):
    """Read every image file in ``directory`` into an UnlabeledImageSet of ``shape``.

    Stands in for large external outlier corpora.
    """
    from PIL import Image

    directory = Path(directory)
    if not directory.is_dir():
        raise LoadError(f"outlier directory {directory} does not exist")
    if (directory / "manifest").exists():
        return load_unlabeled(directory)
    channels, height, width = shape
    mode = "L" if channels == 1 else "RGB"
    arrays = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in (".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp"):
            continue
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
        except OSError as exc:
            raise LoadError(f"cannot decode image {p}: {exc}") from exc
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        arrays.append(resize_images(arr[None], height, width)[0])
    if not arrays:
        raise LoadError(f"no images found in {directory}")
    return UnlabeledImageSet(np.stack(arrays), name=name or directory.name,
                             provenance="external-directory")


# ---------------------------------------------------------------------------
# Initialization

def init_distilled(t_in, t_out, ipc, outlier_count, rng_seed, method="dsa", outlier_mode=None):
    """Sample real images into a fresh DistilledSet.

    ``ipc`` images per class are drawn without replacement, class-ascending,
    from a single RNG stream. When ``t_out`` carries corruption tags the
    outlier rows go round-robin over the tags in first-seen order.
    """
    if ipc < 1:
        raise InitializationError("ipc must be >= 1")
    t_out = t_out if t_out is not None else empty_outliers(t_in.shape)
    if outlier_count < 0 or outlier_count > len(t_out):
        raise InitializationError(f"outlier_count={outlier_count} but |t_out|={len(t_out)}")
    if outlier_count and t_out.shape != t_in.shape:
        raise InitializationError(f"outlier shape {t_out.shape} != InD shape {t_in.shape}")
    rng = np.random.default_rng(rng_seed)
    picks = []
    for c in range(t_in.num_classes):
        idx = t_in.class_indices(c)
        if len(idx) < ipc:
            raise InitializationError(f"class {c} has {len(idx)} samples, fewer than ipc={ipc}")
        picks.append(np.sort(rng.choice(idx, ipc, replace=False)))
    picks = np.concatenate(picks)
    s_in = np.array(t_in.images[picks], dtype=np.float32)
    labels = np.repeat(np.arange(t_in.num_classes), ipc).astype(np.int32)

    assignment = None
    if outlier_count and t_out.provenance == "pseudo-corruption" and t_out.tags is not None:
        tags = np.asarray(t_out.tags)
        order = list(dict.fromkeys(t_out.tags))
        pools = {t: list(rng.permutation(np.flatnonzero(tags == t))) for t in order}
        out_idx, assignment = [], []
        for i in range(outlier_count):
            tag = order[i % len(order)]
            if not pools[tag]:
                raise InitializationError(f"not enough outliers tagged {tag!r}")
            out_idx.append(pools[tag].pop())
            assignment.append(tag)
        out_idx = np.asarray(out_idx, dtype=np.int64)
    else:
        out_idx = rng.choice(len(t_out), outlier_count, replace=False) if outlier_count else np.zeros(0, np.int64)
    s_out = np.array(t_out.images[out_idx], dtype=np.float32).reshape(outlier_count, *t_in.shape)

    if outlier_mode is None:
        if not outlier_count:
            outlier_mode = "none"
        else:
            outlier_mode = "poe" if t_out.provenance == "pseudo-corruption" else "oe"
    return DistilledSet(s_in, labels, s_out, ipc, t_in.num_classes, method=method,
                        outlier_mode=outlier_mode, rng_seed=int(rng_seed),
                        corruption_assignment=assignment)


# ---------------------------------------------------------------------------
# Binary containers

def write_array(path, array):
    """4-integer little-endian shape header followed by float32 C-order data."""
    array = np.ascontiguousarray(array, dtype="<f4")
    shape = tuple(array.shape) + (1,) * (4 - array.ndim)
    if len(shape) != 4:
        raise ValidationError(f"{path}: container arrays are at most 4-D")
    with open(path, "wb") as fh:
        fh.write(np.asarray(shape, dtype="<i4").tobytes())
        fh.write(array.tobytes())


def read_array(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated shape header")
    shape = tuple(int(v) for v in np.frombuffer(raw[:16], dtype="<i4"))
    if any(v < 0 for v in shape):
        raise FormatError(f"{path}: negative dimension in header")
    expected = 4 * int(np.prod(shape))
    if len(raw) - 16 != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(shape).astype(np.float32)


def _read_manifest(directory):
    path = Path(directory) / "manifest"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise LoadError(f"{directory}: no manifest") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise IncompatibleFormatError(
            f"{path}: format_version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    return manifest


def _write_manifest(directory, manifest):
    (Path(directory) / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def save_distilled(s, path, extra=None):
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    s.validate()
    manifest = {
        "format_version": FORMAT_VERSION,
        "method": s.method,
        "outlier_mode": s.outlier_mode,
        "ipc": int(s.ipc),
        "num_classes": int(s.num_classes),
        "shape": list(s.shape),
        "rng_seed": int(s.rng_seed),
        "corruption_assignment": s.corruption_assignment,
        "s_out_count": len(s.s_out_images),
    }
    manifest.update(s.extra)
    manifest.update(extra or {})
    write_array(directory / "s_in.bin", s.s_in_images)
    write_array(directory / "s_out.bin", s.s_out_images)
    (directory / "s_in_labels.bin").write_bytes(np.ascontiguousarray(s.s_in_labels, dtype="<i4").tobytes())
    _write_manifest(directory, manifest)
    return directory


_MANIFEST_CORE = {"format_version", "method", "outlier_mode", "ipc", "num_classes", "shape",
                  "rng_seed", "corruption_assignment", "s_out_count"}


def load_distilled(path):
    directory = Path(path)
    manifest = _read_manifest(directory)
    s_in = read_array(directory / "s_in.bin")
    s_out = read_array(directory / "s_out.bin")
    raw = (directory / "s_in_labels.bin").read_bytes()
    if len(raw) % 4 or len(raw) // 4 != len(s_in):
        raise FormatError(f"{directory}/s_in_labels.bin: {len(raw)} bytes for {len(s_in)} images")
    labels = np.frombuffer(raw, dtype="<i4").astype(np.int32)
    if list(s_in.shape[1:]) != list(manifest["shape"]):
        raise FormatError(f"{directory}: s_in shape {s_in.shape} disagrees with manifest")
    extra = {k: v for k, v in manifest.items() if k not in _MANIFEST_CORE}
    return DistilledSet(s_in, labels, s_out, manifest["ipc"], manifest["num_classes"],
                        method=manifest["method"], outlier_mode=manifest["outlier_mode"],
                        rng_seed=manifest["rng_seed"],
                        corruption_assignment=manifest["corruption_assignment"], extra=extra)


def save_unlabeled(t, path, extra=None):
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    write_array(directory / "images.bin", t.images)
    if t.tags is not None:
        (directory / "tags").write_text("".join(f"{tag}\n" for tag in t.tags))
    manifest = {"format_version": FORMAT_VERSION, "name": t.name, "provenance": t.provenance,
                "shape": list(t.shape), "count": len(t)}
    manifest.update(extra or {})
    _write_manifest(directory, manifest)
    return directory


def load_unlabeled(path):
    directory = Path(path)
    manifest = _read_manifest(directory)
    images = read_array(directory / "images.bin")
    tags = None
    if (directory / "tags").exists():
        tags = tuple((directory / "tags").read_text().split())
    return UnlabeledImageSet(images, name=manifest["name"], provenance=manifest["provenance"], tags=tags)
