"""Differentiable siamese augmentation.

A draw records one transform and its parameters. Applying the same draw
to a synthetic batch and a real batch transforms both identically, which
is what makes gradient matching under augmentation meaningful.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError

DSA_POLICY = ("crop", "cutout", "scale", "rotate", "brightness", "saturation", "contrast")
DIFFERENTIABLE = frozenset(DSA_POLICY) | {"identity"}

CROP_RATIO = 0.125
CUTOUT_RATIO = 0.5
SCALE_RATIO = 0.2
ROTATE_DEGREES = 15.0


@dataclass(frozen=True)
class AugDraw:
    op: str = "identity"
    params: dict = field(default_factory=dict)


def validate_policy(policy):
    policy = tuple(policy)
    bad = [p for p in policy if p not in DIFFERENTIABLE]
    if bad:
        raise ConfigError(f"not a differentiable augmentation: {', '.join(bad)}")
    return policy


def draw_augmentation(policy, rng):
    """Pick one transform of ``policy`` uniformly and sample its parameters."""
    policy = validate_policy(policy)
    if not policy:
        return AugDraw()
    op = policy[rng.integers(len(policy))]
    if op == "crop":
        params = {"dx": rng.uniform(-1, 1), "dy": rng.uniform(-1, 1)}
    elif op == "cutout":
        params = {"cx": rng.uniform(), "cy": rng.uniform()}
    elif op == "scale":
        params = {"sx": 1 + SCALE_RATIO * rng.uniform(-1, 1), "sy": 1 + SCALE_RATIO * rng.uniform(-1, 1)}
    elif op == "rotate":
        params = {"degrees": ROTATE_DEGREES * rng.uniform(-1, 1)}
    elif op == "brightness":
        params = {"delta": rng.uniform() - 0.5}
    elif op == "saturation":
        params = {"factor": 2 * rng.uniform()}
    elif op == "contrast":
        params = {"factor": rng.uniform() + 0.5}
    else:
        params = {}
    return AugDraw(op, params)


def _affine(x, matrix):
    theta = torch.tensor(matrix, dtype=x.dtype).expand(len(x), 2, 3)
    grid = F.affine_grid(theta, list(x.shape), align_corners=True)
    return F.grid_sample(x, grid, align_corners=True)


def diff_augment(x, draw):
    """Apply ``draw`` to a batch ``x`` of shape (N, C, H, W)."""
    if draw.op not in DIFFERENTIABLE:
        raise ConfigError(f"not a differentiable augmentation: {draw.op}")
    if draw.op == "identity" or len(x) == 0:
        return x
    p = draw.params
    _, c, h, w = x.shape
    if draw.op == "crop":
        # translate with zero padding, like a padded random crop
        py, px = max(1, round(h * CROP_RATIO)), max(1, round(w * CROP_RATIO))
        sy, sx = round(p["dy"] * py), round(p["dx"] * px)
        padded = F.pad(x, (px, px, py, py))
        return padded[:, :, py + sy:py + sy + h, px + sx:px + sx + w]
    if draw.op == "cutout":
        ch, cw = max(1, round(h * CUTOUT_RATIO)), max(1, round(w * CUTOUT_RATIO))
        y0 = round(p["cy"] * (h - 1)) - ch // 2
        x0 = round(p["cx"] * (w - 1)) - cw // 2
        mask = torch.ones(h, w, dtype=x.dtype)
        mask[max(0, y0):max(0, y0 + ch), max(0, x0):max(0, x0 + cw)] = 0.0
        return x * mask
    if draw.op == "scale":
        return _affine(x, [[p["sx"], 0.0, 0.0], [0.0, p["sy"], 0.0]])
    if draw.op == "rotate":
        a = math.radians(p["degrees"])
        return _affine(x, [[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0]])
    if draw.op == "brightness":
        return (x + p["delta"]).clamp(0.0, 1.0)
    if draw.op == "saturation":
        mean = x.mean(dim=1, keepdim=True)
        return ((x - mean) * p["factor"] + mean).clamp(0.0, 1.0)
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return ((x - mean) * p["factor"] + mean).clamp(0.0, 1.0)
