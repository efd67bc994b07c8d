"""Outlier-aware dataset distillation.

Both matching schemes share one loop: take a network ``theta`` (carried
over for gradient matching, sampled from an expert trajectory for
trajectory matching), update it on the distilled set with the integrated
loss, measure how far the distilled set is from the real data, and step
the distilled images down that distance.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .augment import DSA_POLICY, diff_augment, draw_augmentation, validate_policy
from .data import DistilledSet, init_distilled
from .errors import ConfigError, DegenerateTrajectoryError, DistillationAborted, NumericError
from .networks import (
    NetworkSpec,
    build_network,
    integrated_loss,
    load_trajectory,
    make_layout,
    uniformity_loss,
)

__all__ = [
    "DistillConfig",
    "uniformity_loss",
    "integrated_loss",
    "gradient_distance",
    "dsa_match_loss",
    "mtt_match_loss",
    "run_trustdd",
    "single_set_distill",
]

COSINE_EPS = 1e-8
TELEMETRY_COLUMNS = ("iteration", "distill_loss", "ce_component", "uniformity_component", "wall_ms")


@dataclass(frozen=True)
class DistillConfig:
    method: str = "dsa"
    lam: float = 0.5
    lr_net: float = 0.01
    lr_img: float = 0.1
    net_steps: int = 1
    image_steps: int = 1
    iterations: int = 500
    ipc: int = 10
    outlier_count: int = 0
    batch_real: int = 256
    batch_syn: int | None = None
    net_momentum: float = 0.5
    img_momentum: float = 0.5
    restart_every: int | None = None
    expert_buffer_path: str | None = None
    expert_segment: int = 2
    max_start_step: int | None = None
    augmentation_policy: tuple = DSA_POLICY
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "augmentation_policy", validate_policy(self.augmentation_policy))
        if self.method not in ("dsa", "mtt", "single-set-dsa"):
            raise ConfigError(f"unknown distillation method {self.method!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lr_net <= 0 or self.lr_img <= 0:
            raise ConfigError("learning rates must be positive")
        if min(self.net_steps, self.image_steps, self.iterations, self.ipc) < 1:
            raise ConfigError("net_steps, image_steps, iterations and ipc must be >= 1")
        if self.method == "mtt" and self.net_steps >= self.expert_segment:
            raise ConfigError("trajectory matching needs net_steps < expert_segment")
        if self.method == "single-set-dsa" and self.outlier_count:
            raise ConfigError("single-set distillation keeps no separate outlier rows")


# ---------------------------------------------------------------------------
# Losses

def gradient_distance(g_syn, g_real, layout):
    """Layerwise sum of ``1 - cos`` over output-channel slices.

    One-dimensional entries (biases, norm affines) are skipped: a per-channel
    scalar has a degenerate cosine.
    """
    total = g_syn.new_zeros(())
    for name, shape, off in layout:
        if len(shape) == 1:
            continue
        n = math.prod(shape)
        a = g_syn[off:off + n].reshape(shape[0], -1)
        b = g_real[off:off + n].reshape(shape[0], -1)
        dot = (a * b).sum(dim=1)
        norms = torch.sqrt((a * a).sum(dim=1) * (b * b).sum(dim=1)).clamp_min(COSINE_EPS)
        total = total + (1.0 - dot / norms).sum()
    return total


def _grad(loss, theta, create_graph=False):
    (g,) = torch.autograd.grad(loss, theta, create_graph=create_graph)
    return g


def dsa_match_loss(theta, syn_in, syn_labels, syn_out, real_in, real_labels, real_out, lam, draw,
                   spec, layout=None, syn_lam=None, parts=None):
    """Distance between the parameter gradients of the synthetic and real batches.

    Both sides use the integrated loss under the same augmentation draw.
    ``syn_lam`` defaults to ``lam``; the single-set variant passes 0.
    """
    layout = layout or make_layout(spec)
    theta = theta.detach().requires_grad_(True)
    a = lambda x: diff_augment(x, draw) if x is not None else None
    real_loss = integrated_loss(theta, a(real_in), real_labels, a(real_out), lam, spec, layout)
    g_real = _grad(real_loss, theta).detach()
    syn_loss = integrated_loss(theta, a(syn_in), syn_labels, a(syn_out),
                               lam if syn_lam is None else syn_lam, spec, layout, parts=parts)
    g_syn = _grad(syn_loss, theta, create_graph=True)
    if g_syn.shape != g_real.shape:
        raise RuntimeError("synthetic and real gradients have different shapes")
    return gradient_distance(g_syn, g_real, layout)


def mtt_match_loss(syn_in, syn_labels, syn_out, buffer, start_step, net_steps, segment, lr, lam,
                   policy=(), rng=None, parts=None):
    """Normalized distance between ``net_steps`` synthetic updates and ``segment`` expert updates.

    Starts from the expert snapshot at ``start_step``; gradients flow through
    every unrolled update back into the distilled pixels.
    """
    spec = buffer.spec
    layout = buffer.snapshots[0].layout
    dtype = syn_in.dtype
    start = buffer.at(start_step).tensor(dtype)
    target = buffer.at(start_step + segment).tensor(dtype)
    denom = ((start - target) ** 2).sum()
    if denom == 0:
        raise DegenerateTrajectoryError(f"expert snapshots at {start_step} and {start_step + segment} coincide")
    theta = start.clone().requires_grad_(True)
    for _ in range(net_steps):
        draw = draw_augmentation(policy, rng) if policy else None
        x_in = diff_augment(syn_in, draw) if draw else syn_in
        x_out = diff_augment(syn_out, draw) if draw and syn_out is not None else syn_out
        loss = integrated_loss(theta, x_in, syn_labels, x_out, lam, spec, layout, parts=parts)
        theta = theta - lr * _grad(loss, theta, create_graph=True)
    return ((theta - target) ** 2).sum() / denom


# ---------------------------------------------------------------------------
# Main loop

class Telemetry:
    """Append-only per-iteration loss log."""

    def __init__(self, path=None, header=None):
        self.rows = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w") as fh:
                if header:
                    fh.write(f"# {header}\n")
                fh.write(",".join(TELEMETRY_COLUMNS) + "\n")

    def append(self, iteration, loss, ce, unif, wall_ms):
        row = (iteration, loss, ce, unif, wall_ms)
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(f"{iteration},{loss:.9g},{ce:.9g},{unif:.9g},{wall_ms:.3f}\n")

    def losses(self):
        return np.array([r[1] for r in self.rows])


def _class_batches(t_in, syn_labels):
    return [t_in.class_indices(c) for c in range(int(syn_labels.max()) + 1)]


def run_trustdd(t_in, t_out, cfg, spec=None, buffer=None, telemetry_path=None, telemetry_header=None,
                dtype=torch.float32):
    """Distill ``t_in`` (and ``t_out`` when outliers are in play) into a DistilledSet."""
    spec = spec or NetworkSpec(t_in.num_classes, t_in.shape)
    if spec.input_shape != t_in.shape:
        raise ConfigError(f"network input {spec.input_shape} does not match data {t_in.shape}")
    has_outliers = t_out is not None and len(t_out) > 0
    if not has_outliers and (cfg.outlier_count or cfg.lam):
        cfg = replace(cfg, lam=0.0, outlier_count=0)
    s = init_distilled(t_in, t_out if has_outliers else None, cfg.ipc, cfg.outlier_count,
                       cfg.rng_seed, method=cfg.method)
    if cfg.method == "mtt":
        if buffer is None:
            if not cfg.expert_buffer_path:
                raise ConfigError("trajectory matching needs an expert buffer")
            buffer = load_trajectory(cfg.expert_buffer_path)
        if buffer.spec != spec:
            raise ConfigError("expert buffer was trained with a different network spec")

    lam = cfg.lam
    use_real_out = has_outliers and lam > 0
    syn_in = torch.tensor(s.s_in_images, dtype=dtype, requires_grad=True)
    syn_out = torch.tensor(s.s_out_images, dtype=dtype, requires_grad=True)
    has_syn_out = len(s.s_out_images) > 0
    syn_labels = torch.as_tensor(s.s_in_labels, dtype=torch.long)
    params = [syn_in] + ([syn_out] if has_syn_out else [])
    opt = torch.optim.SGD(params, lr=cfg.lr_img, momentum=cfg.img_momentum)

    ss = np.random.SeedSequence(cfg.rng_seed)
    rng_net, rng_real, rng_out, rng_aug = (np.random.default_rng(c) for c in ss.spawn(4))
    layout = make_layout(spec)
    policy = cfg.augmentation_policy
    class_idx = _class_batches(t_in, s.s_in_labels)
    x_real = torch.as_tensor(t_in.images, dtype=dtype)
    x_out_real = torch.as_tensor(t_out.images, dtype=dtype) if use_real_out else None
    restart = cfg.restart_every or max(1, cfg.iterations // 10)
    syn_lam = 0.0 if cfg.method == "single-set-dsa" else lam
    telemetry = Telemetry(telemetry_path, telemetry_header)
    theta = velocity = None

    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        parts = {}
        s_out_t = syn_out if has_syn_out else None
        if cfg.method == "mtt":
            # default start window: first half of the expert run
            limit = buffer.steps[-1] // 2 if cfg.max_start_step is None else cfg.max_start_step
            steps = [t for t in buffer.steps if t + cfg.expert_segment in buffer.steps and t <= limit]
            if not steps:
                raise ConfigError("no expert start step has a snapshot expert_segment steps later")
            start = steps[rng_net.integers(len(steps))]
            loss = mtt_match_loss(syn_in, syn_labels, s_out_t, buffer, start, cfg.net_steps,
                                  cfg.expert_segment, cfg.lr_net, syn_lam, policy, rng_aug, parts)
        else:
            if it % restart == 0:
                theta = build_network(spec, int(rng_net.integers(2 ** 31))).tensor(dtype)
                velocity = torch.zeros_like(theta)
            for _ in range(cfg.net_steps):
                draw = draw_augmentation(policy, rng_aug)
                theta.requires_grad_(True)
                with torch.no_grad():
                    bx = diff_augment(syn_in, draw)
                    bo = diff_augment(syn_out, draw) if has_syn_out else None
                net_loss = integrated_loss(theta, bx, syn_labels, bo, syn_lam, spec, layout)
                g = _grad(net_loss, theta)
                theta = theta.detach()
                velocity.mul_(cfg.net_momentum).add_(g)
                theta.sub_(cfg.lr_net * velocity)
            loss = None
        for _ in range(cfg.image_steps):
            if cfg.method != "mtt":
                loss = syn_in.new_zeros(())
                for c, idx in enumerate(class_idx):
                    pick = rng_real.choice(idx, min(cfg.batch_real, len(idx)), replace=False)
                    real_out = None
                    if use_real_out:
                        opick = rng_out.choice(len(x_out_real), min(cfg.batch_real, len(x_out_real)),
                                               replace=False)
                        real_out = x_out_real[opick]
                    draw = draw_augmentation(policy, rng_aug)
                    sl = slice(c * cfg.ipc, (c + 1) * cfg.ipc)
                    loss = loss + dsa_match_loss(theta, syn_in[sl], syn_labels[sl], s_out_t,
                                                 x_real[pick], torch.full((len(pick),), c), real_out,
                                                 lam, draw, spec, layout, syn_lam=syn_lam, parts=parts)
            elif loss is None:
                loss = mtt_match_loss(syn_in, syn_labels, s_out_t, buffer, start, cfg.net_steps,
                                      cfg.expert_segment, cfg.lr_net, syn_lam, policy, rng_aug, parts)
            if not torch.isfinite(loss):
                raise DistillationAborted(f"non-finite distillation loss at iteration {it}", it,
                                          telemetry.rows)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            with torch.no_grad():
                syn_in.clamp_(0.0, 1.0)
                syn_out.clamp_(0.0, 1.0)
            last = float(loss.detach())
            loss = None
        telemetry.append(it, last, parts.get("ce", 0.0), parts.get("uniformity", 0.0),
                         (time.perf_counter() - t0) * 1000.0)

    s.s_in_images = syn_in.detach().numpy().astype(np.float32)
    s.s_out_images = syn_out.detach().numpy().astype(np.float32)
    s.extra["lambda"] = float(lam)
    s.extra["iterations"] = int(cfg.iterations)
    if cfg.method == "single-set-dsa":
        s.outlier_mode = "none"
    s.validate()
    s.telemetry = telemetry
    return s


def single_set_distill(t_in, t_out, cfg, spec=None, **kwargs):
    """Distill InD data and outliers into one labeled set with no outlier rows.

    The synthetic side is trained with plain cross-entropy while the real
    side keeps the integrated loss.
    """
    if cfg.method != "single-set-dsa":
        raise ConfigError("single_set_distill requires method 'single-set-dsa'")
    return run_trustdd(t_in, t_out, cfg, spec, **kwargs)
