"""Functional ConvNet over a flat parameter vector.

Keeping all weights in one 1-D tensor lets the distillation code unroll
inner SGD steps (``theta - lr * grad``) and differentiate through them.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import FORMAT_VERSION, _read_manifest, _write_manifest, read_array, write_array
from .errors import FormatError, NumericError, SpecError, TrainingError, ValidationError

IN_EPS = 1e-5


@dataclass(frozen=True)
class NetworkSpec:
    num_classes: int
    input_shape: tuple
    depth: int = 3
    width: int = 128
    norm: str = "instance"
    activation: str = "relu"
    pool: str = "average"
    affine: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.input_shape) != 3:
            raise SpecError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.depth < 1 or self.width < 1 or self.num_classes < 2:
            raise SpecError("depth and width must be >= 1 and num_classes >= 2")
        if (self.norm, self.activation, self.pool) != ("instance", "relu", "average"):
            raise SpecError("only instance norm / relu / average pooling are supported")
        _, h, w = self.input_shape
        if h >> self.depth < 1 or w >> self.depth < 1:
            raise SpecError(f"{self.depth} halvings of {h}x{w} leave no spatial extent")

    @property
    def feature_hw(self):
        _, h, w = self.input_shape
        return h >> self.depth, w >> self.depth

    def layer_shapes(self):
        shapes = []
        c_in = self.input_shape[0]
        for i in range(self.depth):
            shapes.append((f"conv{i}.weight", (self.width, c_in, 3, 3)))
            shapes.append((f"conv{i}.bias", (self.width,)))
            if self.affine:
                shapes.append((f"norm{i}.weight", (self.width,)))
                shapes.append((f"norm{i}.bias", (self.width,)))
            c_in = self.width
        fh, fw = self.feature_hw
        shapes.append(("fc.weight", (self.num_classes, self.width * fh * fw)))
        shapes.append(("fc.bias", (self.num_classes,)))
        return shapes

    def num_parameters(self):
        return sum(math.prod(s) for _, s in self.layer_shapes())

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def make_layout(spec):
    layout, offset = [], 0
    for name, shape in spec.layer_shapes():
        layout.append((name, tuple(shape), offset))
        offset += math.prod(shape)
    return tuple(layout)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    flat: np.ndarray
    layout: tuple

    def __post_init__(self):
        total = sum(math.prod(shape) for _, shape, _ in self.layout)
        if self.flat.ndim != 1 or total != len(self.flat):
            raise SpecError(f"layout covers {total} values but flat has {self.flat.shape}")

    def unflatten(self):
        return {name: self.flat[off:off + math.prod(shape)].reshape(shape)
                for name, shape, off in self.layout}

    @classmethod
    def flatten(cls, arrays, layout):
        flat = np.concatenate([np.asarray(arrays[name]).reshape(-1) for name, _, _ in layout])
        return cls(flat, layout)

    def tensor(self, dtype=torch.float32):
        return torch.tensor(self.flat, dtype=dtype)

    @classmethod
    def from_tensor(cls, t, layout):
        return cls(t.detach().cpu().numpy().copy(), layout)

    def __len__(self):
        return len(self.flat)


def build_network(spec, rng_seed, dtype=np.float32, zero_head=False):
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(rng_seed)
    layout = make_layout(spec)
    flat = np.empty(spec.num_parameters(), dtype=dtype)
    fan_in = 1
    for name, shape, off in layout:
        n = math.prod(shape)
        if name.startswith("norm"):
            flat[off:off + n] = 1.0 if name.endswith("weight") else 0.0
            continue
        if name.endswith("weight"):
            fan_in = math.prod(shape[1:])
        bound = 1.0 / math.sqrt(fan_in)
        if zero_head and name.startswith("fc."):
            flat[off:off + n] = 0.0
        else:
            flat[off:off + n] = rng.uniform(-bound, bound, n)
    return ParameterVector(flat, layout)


def _views(theta, layout):
    return {name: theta[off:off + math.prod(shape)].view(shape) for name, shape, off in layout}


def forward_logits(theta, images, spec, layout=None, check_finite=True):
    """Logits for ``images`` under the flat parameters ``theta`` (a tensor).

    Differentiable with respect to both arguments.
    """
    if isinstance(theta, ParameterVector):
        layout = theta.layout
        theta = theta.tensor(images.dtype if torch.is_tensor(images) else torch.float32)
    if not torch.is_tensor(images):
        images = torch.as_tensor(np.asarray(images), dtype=theta.dtype)
    if tuple(images.shape[1:]) != spec.input_shape:
        raise SpecError(f"images of shape {tuple(images.shape[1:])} do not match {spec.input_shape}")
    p = _views(theta, layout or make_layout(spec))
    x = images
    for i in range(spec.depth):
        x = F.conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=1)
        x = F.instance_norm(x, weight=p.get(f"norm{i}.weight"), bias=p.get(f"norm{i}.bias"), eps=IN_EPS)
        x = F.avg_pool2d(F.relu(x), 2)
        if check_finite and not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations after block conv{i}")
    logits = F.linear(x.flatten(1), p["fc.weight"], p["fc.bias"])
    if check_finite and not torch.isfinite(logits).all():
        raise NumericError("non-finite activations after layer fc")
    return logits


def uniformity_loss(logits):
    """Mean cross-entropy between the uniform distribution and softmax(logits).

    Always ``>= log C``, with equality exactly for constant rows.
    """
    if logits.shape[-1] < 2:
        raise ValueError("uniformity loss needs at least two classes")
    return -F.log_softmax(logits, dim=-1).mean(dim=-1).mean()


def integrated_loss(theta, in_images, in_labels, out_images, lam, spec, layout=None, parts=None):
    """``CE(in) + lam * uniformity(out)``; the second term is skipped when it cannot contribute."""
    in_labels = torch.as_tensor(in_labels, dtype=torch.long)
    if in_labels.numel() and (in_labels.min() < 0 or in_labels.max() >= spec.num_classes):
        raise ValidationError(f"label outside [0, {spec.num_classes})")
    use_out = lam != 0 and out_images is not None and len(out_images) > 0
    if use_out:
        logits = forward_logits(theta, torch.cat([in_images, out_images]), spec, layout)
        ce = F.cross_entropy(logits[:len(in_images)], in_labels)
        unif = uniformity_loss(logits[len(in_images):])
        total = ce + lam * unif
    else:
        ce = F.cross_entropy(forward_logits(theta, in_images, spec, layout), in_labels)
        unif = None
        total = ce
    if parts is not None:
        parts["ce"] = float(ce.detach())
        parts["uniformity"] = float(unif.detach()) if unif is not None else 0.0
    return total


def _sgd(theta, grad, velocity, lr, momentum):
    if momentum:
        velocity.mul_(momentum).add_(grad)
        grad = velocity
    theta.sub_(lr * grad)


def train_on_distilled(s, spec, hyper=None, rng_seed=0, history=None, dtype=torch.float32):
    """Train a fresh network on a DistilledSet with the integrated loss.

    ``hyper`` keys: lr (0.01), momentum (0.9), epochs (300) or steps,
    batch (256), lam (0.5), augmentation (policy list, default none).
    """
    from .augment import diff_augment, draw_augmentation

    h = {"lr": 0.01, "momentum": 0.9, "epochs": 300, "steps": None, "batch": 256,
         "lam": 0.5, "augmentation": ()}
    h.update(hyper or {})
    if h["lam"] < 0:
        raise ValueError("lambda must be non-negative")
    rng = np.random.default_rng(rng_seed)
    params = build_network(spec, rng_seed)
    layout = params.layout
    theta = params.tensor(dtype)
    x_in = torch.as_tensor(s.s_in_images, dtype=dtype)
    y_in = torch.as_tensor(s.s_in_labels, dtype=torch.long)
    x_out = torch.as_tensor(s.s_out_images, dtype=dtype)
    n_in, n_out = len(x_in), len(x_out)
    lam = h["lam"] if n_out else 0.0
    batch = min(h["batch"], n_in)
    steps = h["steps"] if h["steps"] is not None else h["epochs"] * math.ceil(n_in / batch)
    velocity = torch.zeros_like(theta)

    def full_loss():
        with torch.no_grad():
            return float(integrated_loss(theta, x_in, y_in, x_out, lam, spec, layout))

    if history is not None:
        history.append(full_loss())
    for step in range(steps):
        idx = rng.permutation(n_in)[:batch] if batch < n_in else np.arange(n_in)
        bx, by = x_in[idx], y_in[idx]
        bo = x_out[rng.permutation(n_out)[:batch]] if lam and batch < n_out else x_out
        if h["augmentation"]:
            draw = draw_augmentation(h["augmentation"], rng)
            bx = diff_augment(bx, draw)
            bo = diff_augment(bo, draw) if lam else bo
        theta.requires_grad_(True)
        try:
            loss = integrated_loss(theta, bx, by, bo, lam, spec, layout)
        except NumericError as exc:
            raise TrainingError(f"training diverged at step {step}: {exc}", step) from exc
        if not torch.isfinite(loss):
            raise TrainingError(f"training loss became non-finite at step {step}", step)
        (grad,) = torch.autograd.grad(loss, theta)
        theta = theta.detach()
        _sgd(theta, grad, velocity, h["lr"], h["momentum"])
    if history is not None:
        history.append(full_loss())
    return ParameterVector.from_tensor(theta, layout)


def predict_logits(params, images, spec, batch=1024):
    theta = params.tensor(torch.float32)
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.as_tensor(np.asarray(images[i:i + batch]), dtype=torch.float32)
            out.append(forward_logits(theta, x, spec, params.layout))
    if not out:
        return np.zeros((0, spec.num_classes), dtype=np.float32)
    return torch.cat(out).numpy()


# ---------------------------------------------------------------------------
# Expert trajectories

@dataclass(eq=False)
class TrajectoryBuffer:
    snapshots: list
    steps: list
    spec: NetworkSpec
    training_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.snapshots) != len(self.steps):
            raise SpecError("one step index per snapshot is required")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise SpecError("snapshot steps must be strictly increasing")
        if self.snapshots and any(s.layout != self.snapshots[0].layout for s in self.snapshots):
            raise SpecError("all snapshots must share one layout")

    def at(self, step):
        try:
            return self.snapshots[self.steps.index(step)]
        except ValueError:
            raise KeyError(f"no snapshot at step {step}") from None

    def __len__(self):
        return len(self.snapshots)


def expert_trajectories(t_in, t_out, spec, config=None, rng_seed=0, dtype=torch.float32):
    """Train on the full real data and snapshot parameters every ``snapshot_interval`` steps.

    config keys: epochs (2), snapshot_interval (steps per epoch), lr (0.01),
    momentum (0), batch (256), lam (0.5), use_integrated_loss (True),
    augmentation (policy list).
    """
    from .augment import diff_augment, draw_augmentation

    c = {"epochs": 2, "snapshot_interval": None, "lr": 0.01, "momentum": 0.0, "batch": 256,
         "lam": 0.5, "use_integrated_loss": True, "augmentation": ()}
    c.update(config or {})
    n_out = len(t_out) if t_out is not None else 0
    if c["use_integrated_loss"] and c["lam"] and not n_out:
        raise ValueError("integrated-loss experts need a non-empty outlier set")
    lam = c["lam"] if c["use_integrated_loss"] else 0.0
    rng = np.random.default_rng(rng_seed)
    params = build_network(spec, rng_seed)
    layout = params.layout
    theta = params.tensor(dtype)
    x_in = torch.as_tensor(t_in.images, dtype=dtype)
    y_in = torch.as_tensor(t_in.labels, dtype=torch.long)
    x_out = torch.as_tensor(t_out.images, dtype=dtype) if n_out else None
    batch = min(c["batch"], len(x_in))
    per_epoch = math.ceil(len(x_in) / batch)
    total = c["epochs"] * per_epoch
    interval = c["snapshot_interval"] or per_epoch
    velocity = torch.zeros_like(theta)
    snapshots, steps = [ParameterVector.from_tensor(theta, layout)], [0]
    step = 0
    for _ in range(c["epochs"]):
        order = rng.permutation(len(x_in))
        for b in range(per_epoch):
            idx = order[b * batch:(b + 1) * batch]
            bx, by = x_in[idx], y_in[idx]
            bo = x_out[rng.integers(0, n_out, len(idx))] if lam else None
            if c["augmentation"]:
                draw = draw_augmentation(c["augmentation"], rng)
                bx = diff_augment(bx, draw)
                bo = diff_augment(bo, draw) if bo is not None else None
            theta.requires_grad_(True)
            loss = integrated_loss(theta, bx, by, bo, lam, spec, layout)
            if not torch.isfinite(loss):
                raise TrainingError(f"expert training diverged at step {step}", step)
            (grad,) = torch.autograd.grad(loss, theta)
            theta = theta.detach()
            _sgd(theta, grad, velocity, c["lr"], c["momentum"])
            step += 1
            if step % interval == 0:
                snapshots.append(ParameterVector.from_tensor(theta, layout))
                steps.append(step)
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in c.items()}
    cfg.update(rng_seed=int(rng_seed), total_steps=total)
    return TrajectoryBuffer(snapshots, steps, spec, cfg)


def save_trajectory(buffer, path):
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    for i, snap in enumerate(buffer.snapshots):
        write_array(directory / f"{i:05d}.bin", snap.flat)
    _write_manifest(directory, {
        "format_version": FORMAT_VERSION,
        "steps": [int(s) for s in buffer.steps],
        "spec": buffer.spec.to_dict(),
        "training_config": buffer.training_config,
    })
    return directory


def load_trajectory(path):
    directory = Path(path)
    manifest = _read_manifest(directory)
    spec = NetworkSpec(**manifest["spec"])
    layout = make_layout(spec)
    snapshots = []
    for i in range(len(manifest["steps"])):
        flat = read_array(directory / f"{i:05d}.bin").reshape(-1)
        if len(flat) != spec.num_parameters():
            raise FormatError(f"{directory}/{i:05d}.bin has {len(flat)} values, expected {spec.num_parameters()}")
        snapshots.append(ParameterVector(flat, layout))
    return TrajectoryBuffer(snapshots, list(manifest["steps"]), spec, manifest["training_config"])


def spec_from_json(text):
    return NetworkSpec(**json.loads(text))
