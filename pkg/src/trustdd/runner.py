"""Experiment orchestration: config files, distill -> train -> evaluate, ablations, exports.

A config is a flat text file of ``section.key=value`` lines; ``#`` starts a
comment. Every key has a default, unknown keys are rejected, and all paths
are checked before any compute starts. The sha256 of the resolved config
(minus output location and worker count) is stamped into every artifact.
"""
from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .augment import DSA_POLICY
from .corruptions import CORRUPTIONS, CorruptionConfig, noise_outliers, synthesize_outliers
from .data import (
    BLOB_OOD_KINDS,
    _read_manifest,
    UnlabeledImageSet,
    load_dataset,
    load_distilled,
    load_image_directory,
    load_mnist_dir,
    make_blob_outliers,
    match_channels,
    resize_images,
    save_distilled,
    save_unlabeled,
)
from .distill import DistillConfig, run_trustdd
from .errors import ConfigError, DistillationAborted, PartialReportError, TrustDDError
from .networks import NetworkSpec, expert_trajectories, load_trajectory, save_trajectory
from .ood import SCORES, evaluate_protocol, format_table, read_cells, write_report

log = logging.getLogger(__name__)

OUTLIER_MODES = ("none", "poe", "oe-directory", "oe-gaussian", "oe-uniform")
ABLATION_AXES = ("outlier-source", "s-out-size", "ipc", "random-vs-distilled", "single-set",
                 "corruption-type", "lambda")
TAG_ORDER = ("jigsaw", "invert", "mosaic", "speckle", "flip")


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _opt_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_bool(text):
    return None if text.strip().lower() in ("", "none", "auto") else _bool(text)


# key -> (parser, default as text)
SCHEMA = {
    "experiment.seed": (int, "0"),
    "experiment.runs": (int, "3"),
    "experiment.output": (str, "trustdd-out"),
    "experiment.workers": (int, "1"),
    "data.source": (str, "blobs"),
    "data.classes": (int, "2"),
    "data.count": (int, "1000"),
    "data.test_count": (int, "500"),
    "data.size": (int, "8"),
    "data.channels": (int, "1"),
    "data.seed": (int, "0"),
    "data.digits": (_opt_bool, "auto"),
    "outliers.mode": (str, "poe"),
    "outliers.count": (int, "1000"),
    "outliers.directory": (str, ""),
    "outliers.corruptions": (_list, "jigsaw,invert,mosaic,speckle"),
    "outliers.seed": (int, "1"),
    "distill.method": (str, "dsa"),
    "distill.lambda": (float, "0.5"),
    "distill.lr_net": (float, "0.01"),
    "distill.lr_img": (float, "0.1"),
    "distill.net_steps": (int, "1"),
    "distill.image_steps": (int, "1"),
    "distill.iterations": (int, "500"),
    "distill.ipc": (int, "10"),
    "distill.outlier_count": (int, "100"),
    "distill.batch_real": (int, "256"),
    "distill.net_momentum": (float, "0.5"),
    "distill.img_momentum": (float, "0.5"),
    "distill.restart_every": (_opt_int, "none"),
    "distill.augmentation": (_list, ",".join(DSA_POLICY)),
    "distill.expert_buffer": (str, ""),
    "distill.expert_segment": (int, "2"),
    "distill.max_start_step": (_opt_int, "none"),
    "expert.epochs": (int, "2"),
    "expert.lr": (float, "0.01"),
    "expert.batch": (int, "256"),
    "network.depth": (int, "3"),
    "network.width": (int, "128"),
    "network.norm": (str, "instance"),
    "network.activation": (str, "relu"),
    "network.pool": (str, "average"),
    "network.affine": (_bool, "false"),
    "eval.ood": (_list, ",".join(f"blobs-{k}" for k in BLOB_OOD_KINDS)),
    "eval.ood_count": (int, "500"),
    "eval.scores": (_list, ",".join(SCORES)),
    "eval.models_per_run": (int, "5"),
    "eval.epochs": (int, "300"),
    "eval.steps": (_opt_int, "none"),
    "eval.lr": (float, "0.01"),
    "eval.momentum": (float, "0.9"),
    "eval.batch": (int, "256"),
    "eval.lambda": (_opt_float, "none"),
    "eval.augmentation": (_list, ",".join(DSA_POLICY)),
    "eval.temperature": (float, "1.0"),
    "eval.include_noise": (_bool, "false"),
    "ablate.values": (_list, ""),
}

# keys that do not change any computed number
_UNHASHED = {"experiment.output", "experiment.workers"}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    checksum: str
    source: str = "<defaults>"

    def __getitem__(self, key):
        return self.values[key]

    @property
    def output(self):
        return Path(self["experiment.output"])

    @property
    def outlier_mode(self):
        return self["outliers.mode"]

    @property
    def digits(self):
        flag = self["data.digits"]
        if flag is None:
            return self["data.source"] not in ("blobs",)
        return flag

    @property
    def lam(self):
        return 0.0 if self.outlier_mode == "none" else self["distill.lambda"]

    def with_values(self, **updates):
        """A copy with ``section__key=value`` overrides (already parsed values)."""
        values = dict(self.values)
        for name, value in updates.items():
            key = name.replace("__", ".", 1)
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return _finish(values, self.source)

    def shape(self):
        if self["data.source"] == "blobs":
            return (self["data.channels"], self["data.size"], self["data.size"])
        return None

    def network_spec(self, num_classes, input_shape):
        return NetworkSpec(num_classes, tuple(input_shape), depth=self["network.depth"],
                           width=self["network.width"], norm=self["network.norm"],
                           activation=self["network.activation"], pool=self["network.pool"],
                           affine=self["network.affine"])

    def distill_config(self, run_seed):
        outlier_count = 0 if self.outlier_mode == "none" else self["distill.outlier_count"]
        method = self["distill.method"]
        if method == "single-set-dsa":
            outlier_count = 0
        return DistillConfig(
            method=method, lam=self.lam, lr_net=self["distill.lr_net"], lr_img=self["distill.lr_img"],
            net_steps=self["distill.net_steps"], image_steps=self["distill.image_steps"],
            iterations=self["distill.iterations"], ipc=self["distill.ipc"], outlier_count=outlier_count,
            batch_real=self["distill.batch_real"], net_momentum=self["distill.net_momentum"],
            img_momentum=self["distill.img_momentum"], restart_every=self["distill.restart_every"],
            expert_buffer_path=self["distill.expert_buffer"] or None,
            expert_segment=self["distill.expert_segment"], max_start_step=self["distill.max_start_step"],
            augmentation_policy=self["distill.augmentation"], rng_seed=run_seed,
        )

    def eval_hyper(self, lam):
        return {"lr": self["eval.lr"], "momentum": self["eval.momentum"], "epochs": self["eval.epochs"],
                "steps": self["eval.steps"], "batch": self["eval.batch"],
                "lam": lam if self["eval.lambda"] is None else self["eval.lambda"],
                "augmentation": self["eval.augmentation"]}

    def dump(self):
        return "".join(f"{k}={_render(self.values[k])}\n" for k in SCHEMA)


def _render(value):
    if isinstance(value, tuple):
        return ",".join(value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    return str(value)


def _checksum(values):
    text = "".join(f"{k}={_render(values[k])}\n" for k in sorted(values) if k not in _UNHASHED)
    return hashlib.sha256(text.encode()).hexdigest()


def _finish(values, source):
    cfg = ExperimentConfig(values, _checksum(values), source)
    _validate(cfg)
    return cfg


def parse_config(text="", overrides=(), source="<string>"):
    """Parse config text plus ``key=value`` overrides into a validated ExperimentConfig."""
    raw = {}
    lines = [(source, n, line) for n, line in enumerate(text.splitlines(), 1)]
    lines += [("override", n, line) for n, line in enumerate(overrides, 1)]
    for where, n, line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{n}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}:{n}: unknown config key {key!r}")
        raw[key] = value
    values = {}
    for key, (parse, default) in SCHEMA.items():
        text_value = raw.get(key, default)
        try:
            values[key] = parse(text_value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text_value!r} ({exc})") from None
    return _finish(values, source)


def load_config(path=None, overrides=()):
    if path is None:
        return parse_config("", overrides, "<defaults>")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), overrides, str(path))


def _ood_path(entry):
    for prefix in ("idx:", "dir:"):
        if entry.startswith(prefix):
            return Path(entry[len(prefix):])
    return None


def _validate(cfg):
    if cfg.outlier_mode not in OUTLIER_MODES:
        raise ConfigError(f"outliers.mode must be one of {OUTLIER_MODES}, got {cfg.outlier_mode!r}")
    if cfg["experiment.runs"] < 1 or cfg["eval.models_per_run"] < 1:
        raise ConfigError("experiment.runs and eval.models_per_run must be >= 1")
    unknown = set(cfg["outliers.corruptions"]) - set(CORRUPTIONS)
    if unknown:
        raise ConfigError(f"unknown corruptions {sorted(unknown)}")
    bad = set(cfg["eval.scores"]) - set(SCORES)
    if bad:
        raise ConfigError(f"unknown scores {sorted(bad)}")
    source = cfg["data.source"]
    if source not in ("blobs", "digits") and not Path(source).is_dir():
        raise ConfigError(f"data.source {source!r} is neither a builtin nor a directory")
    if cfg.outlier_mode == "oe-directory":
        if not cfg["outliers.directory"]:
            raise ConfigError("outliers.mode=oe-directory needs outliers.directory")
        if not Path(cfg["outliers.directory"]).is_dir():
            raise ConfigError(f"outliers.directory {cfg['outliers.directory']} does not exist")
    if cfg["distill.expert_buffer"] and not Path(cfg["distill.expert_buffer"]).is_dir():
        raise ConfigError(f"distill.expert_buffer {cfg['distill.expert_buffer']} does not exist")
    for entry in cfg["eval.ood"]:
        path = _ood_path(entry)
        if path is not None:
            if not path.is_dir():
                raise ConfigError(f"OOD directory {path} does not exist")
        elif not (entry in ("digits", "noise-gaussian", "noise-uniform")
                  or entry.removeprefix("blobs-") in BLOB_OOD_KINDS):
            raise ConfigError(f"unknown OOD set {entry!r}")
    # builds the typed configs so bad values surface here, not mid-run
    cfg.distill_config(0)
    if cfg.shape() is not None:
        cfg.network_spec(cfg["data.classes"], cfg.shape())


def worker_count(cfg):
    """Config workers, capped by ``TRUSTDD_WORKERS`` when set."""
    workers = cfg["experiment.workers"]
    env = os.environ.get("TRUSTDD_WORKERS")
    if env:
        try:
            workers = min(workers, int(env)) if workers > 0 else int(env)
        except ValueError:
            raise ConfigError(f"TRUSTDD_WORKERS must be an integer, got {env!r}") from None
    return max(1, workers)


# ---------------------------------------------------------------------------
# Data assembly

def load_train(cfg):
    return _load_split(cfg, "train", cfg["data.count"])


def load_test(cfg):
    return _load_split(cfg, "test", cfg["data.test_count"])


def _load_split(cfg, split, count):
    source = cfg["data.source"]
    if source == "blobs":
        return load_dataset("blobs", split, classes=cfg["data.classes"], count=count, size=cfg["data.size"],
                            channels=cfg["data.channels"], seed=cfg["data.seed"])
    t = load_dataset(source, split)
    if count and count < len(t):
        rng = np.random.default_rng(cfg["data.seed"] + (split == "test"))
        idx = np.sort(rng.choice(len(t), count, replace=False))
        t = type(t)(t.images[idx], t.labels[idx], t.num_classes, t.name)
    return t


def build_outliers(cfg, t_in, mode=None, corruptions=None):
    """Outlier training pool for ``mode`` (defaults to the configured mode)."""
    mode = mode or cfg.outlier_mode
    count = cfg["outliers.count"]
    if mode == "none":
        return None
    if mode == "poe":
        ccfg = CorruptionConfig(enabled=corruptions or cfg["outliers.corruptions"], digits=cfg.digits,
                                rng_seed=cfg["outliers.seed"])
        return synthesize_outliers(t_in, ccfg, count)
    if mode in ("oe-gaussian", "oe-uniform"):
        return noise_outliers(mode.split("-", 1)[1], t_in.shape, count, cfg["outliers.seed"])
    if mode == "oe-directory":
        o = load_image_directory(cfg["outliers.directory"], t_in.shape)
        return _conform(o, t_in.shape)
    raise ConfigError(f"unknown outlier mode {mode!r}")


def _conform(images_set, shape):
    images = match_channels(images_set.images, shape[0])
    images = resize_images(images, shape[1], shape[2])
    if images is images_set.images:
        return images_set
    return UnlabeledImageSet(images, images_set.name, images_set.provenance, images_set.tags)


def build_test_oods(cfg, shape):
    count = cfg["eval.ood_count"]
    sets = []
    for i, entry in enumerate(cfg["eval.ood"]):
        seed = cfg["data.seed"] * 1000 + 500 + i
        if entry.startswith("blobs-"):
            o = make_blob_outliers(entry[6:], count, shape[1], shape[0], seed=seed)
            o = UnlabeledImageSet(o.images, entry, o.provenance)
        elif entry.startswith("noise-"):
            o = noise_outliers(entry[6:], shape, count, seed)
        elif entry == "digits":
            t = load_dataset("digits", "test")
            o = UnlabeledImageSet(t.images, "digits")
        elif entry.startswith("idx:"):
            t = load_mnist_dir(entry[4:], "test", name=Path(entry[4:]).name)
            o = UnlabeledImageSet(t.images, t.name)
        else:
            o = load_image_directory(entry[4:], shape)
        sets.append(_conform(o, shape))
    return sets


# ---------------------------------------------------------------------------
# Commands

def _distill_one(job):
    t_in, t_out, dcfg, spec, buffer, out_dir, header, run = job
    try:
        return run_trustdd(t_in, t_out, dcfg, spec, buffer, telemetry_path=out_dir / "telemetry.csv",
                           telemetry_header=header)
    except DistillationAborted as exc:
        raise DistillationAborted(f"run {run}: {exc}", exc.iteration, exc.telemetry) from exc


def _expert_buffer(cfg, t_in, t_out, spec, out_dir):
    if cfg["distill.expert_buffer"]:
        return load_trajectory(cfg["distill.expert_buffer"])
    buffer = expert_trajectories(
        t_in, t_out, spec,
        {"epochs": cfg["expert.epochs"], "lr": cfg["expert.lr"], "batch": cfg["expert.batch"],
         "lam": cfg.lam, "use_integrated_loss": t_out is not None},
        rng_seed=cfg["experiment.seed"] * 1000 + 900,
    )
    save_trajectory(buffer, out_dir / "experts")
    return buffer


def cmd_distill(cfg, out_dir=None, t_in=None, t_out=None):
    """Distill ``experiment.runs`` times into ``out_dir/run<r>`` containers.

    Run ``r`` is seeded ``experiment.seed * 1000 + r``.
    """
    out_dir = Path(out_dir) if out_dir else cfg.output / "distilled"
    t_in = t_in if t_in is not None else load_train(cfg)
    if t_out is None and cfg.outlier_mode != "none":
        t_out = build_outliers(cfg, t_in)
    spec = cfg.network_spec(t_in.num_classes, t_in.shape)
    header = f"config_sha256={cfg.checksum}"
    extra = {"config_sha256": cfg.checksum, "network": spec.to_dict()}
    buffer = None
    if cfg["distill.method"] == "mtt":
        buffer = _expert_buffer(cfg, t_in, t_out, spec, out_dir)
    jobs = []
    for r in range(cfg["experiment.runs"]):
        dcfg = cfg.distill_config(cfg["experiment.seed"] * 1000 + r)
        jobs.append((t_in, t_out, dcfg, spec, buffer, out_dir / f"run{r}", header, r))
    if worker_count(cfg) > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=worker_count(cfg)) as pool:
            results = list(pool.map(_distill_one, jobs))
    else:
        results = [_distill_one(j) for j in jobs]
    dirs = []
    for job, s in zip(jobs, results):
        run_dir = job[5]
        save_distilled(s, run_dir, extra=extra)
        dirs.append(run_dir)
    return dirs


def arm_name(s):
    return "baseline" if s.outlier_mode == "none" else s.outlier_mode


def _run_dirs(path):
    path = Path(path)
    if (path / "manifest").is_file():
        return [path]
    runs = sorted(p for p in path.glob("run*") if (p / "manifest").is_file())
    if not runs:
        raise ConfigError(f"{path} holds no distilled-set container")
    return runs


def evaluate_sets(cfg, sets, test_in=None, test_oods=None):
    """Run the evaluation protocol on already loaded DistilledSets."""
    test_in = test_in if test_in is not None else load_test(cfg)
    test_oods = test_oods if test_oods is not None else build_test_oods(cfg, test_in.shape)
    spec = cfg.network_spec(test_in.num_classes, test_in.shape)
    for s in sets:
        if s.shape != spec.input_shape or s.num_classes != spec.num_classes:
            raise ConfigError(f"distilled set of shape {s.shape} with {s.num_classes} classes does not match "
                              f"network input {spec.input_shape} with {spec.num_classes} classes")
    lam = float(sets[0].extra.get("lambda", cfg.lam))
    report = evaluate_protocol(sets, spec, test_in, test_oods, scores=cfg["eval.scores"],
                               models_per_run=cfg["eval.models_per_run"], rng_seed=cfg["experiment.seed"],
                               hyper=cfg.eval_hyper(lam), workers=worker_count(cfg),
                               include_noise=cfg["eval.include_noise"], temperature=cfg["eval.temperature"])
    report.meta["config_sha256"] = cfg.checksum
    return report


def cmd_eval(cfg, arms, out_dir=None):
    """Evaluate distilled sets and write the report tables.

    ``arms`` is a mapping or list of ``(name, path)`` pairs; a name of None
    is inferred from the manifest. Each path holds ``run*`` containers or is
    a single container.
    """
    out_dir = Path(out_dir) if out_dir else cfg.output / "report"
    test_in = load_test(cfg)
    test_oods = build_test_oods(cfg, test_in.shape)
    loaded = {}
    for name, path in (arms.items() if isinstance(arms, dict) else arms):
        sets = [load_distilled(p) for p in _run_dirs(path)]
        name = name or arm_name(sets[0])
        if name in loaded:
            raise ConfigError(f"arm {name!r} given twice; name arms explicitly with NAME=DIR")
        loaded[name] = sets
    reports = {name: evaluate_sets(cfg, sets, test_in, test_oods) for name, sets in loaded.items()}
    write_report(reports, out_dir, header=f"config_sha256={cfg.checksum}")
    return reports


def _arms_for(cfg, axis):
    """``(arm name, config, post-hoc transform or None)`` for an ablation axis."""
    values = cfg["ablate.values"]
    mode = cfg.outlier_mode
    arms = []
    if axis == "outlier-source":
        arms = [("none", cfg.with_values(outliers__mode="none"), None),
                ("gaussian", cfg.with_values(outliers__mode="oe-gaussian"), None),
                ("uniform", cfg.with_values(outliers__mode="oe-uniform"), None)]
        if cfg["outliers.directory"]:
            arms.append(("directory", cfg.with_values(outliers__mode="oe-directory"), None))
        else:
            log.warning("outlier-source: no outliers.directory configured, skipping the directory arm")
    elif axis == "s-out-size":
        if mode == "none":
            raise ConfigError("s-out-size needs an outlier source (outliers.mode != none)")
        for size in values or ("0", "50", "100", "150", "200"):
            size = int(size)
            sub = cfg.with_values(outliers__mode="none") if size == 0 else \
                cfg.with_values(distill__outlier_count=size)
            arms.append((f"s_out={size}", sub, None))
    elif axis == "ipc":
        for ipc in values or ("1", "10", "50"):
            arms.append((f"baseline-ipc{ipc}", cfg.with_values(outliers__mode="none", distill__ipc=int(ipc)), None))
            if mode != "none":
                arms.append((f"{mode}-ipc{ipc}", cfg.with_values(distill__ipc=int(ipc)), None))
    elif axis == "random-vs-distilled":
        oe_mode = "oe-directory" if cfg["outliers.directory"] else "oe-gaussian"
        for tag, sub_mode in (("OE", oe_mode), ("POE", "poe")):
            sub = cfg.with_values(outliers__mode=sub_mode)
            arms.append((f"{tag}-D", sub, None))
            arms.append((f"{tag}-R", sub, "random"))
    elif axis == "single-set":
        if mode == "none":
            raise ConfigError("single-set needs an outlier source (outliers.mode != none)")
        arms = [("baseline", cfg.with_values(outliers__mode="none"), None),
                ("two-set", cfg, None),
                ("single-set", cfg.with_values(distill__method="single-set-dsa"), None)]
    elif axis == "corruption-type":
        if mode != "poe":
            raise ConfigError("corruption-type needs outliers.mode=poe")
        for name in values or cfg["outliers.corruptions"]:
            arms.append((name, cfg.with_values(outliers__corruptions=(name,)), None))
        arms.append(("all", cfg, None))
    elif axis == "lambda":
        if mode == "none":
            raise ConfigError("lambda sweep needs an outlier source (outliers.mode != none)")
        for lam in values or ("0.1", "0.25", "0.5", "1.0"):
            arms.append((f"lambda={lam}", cfg.with_values(distill__lambda=float(lam)), None))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    return arms


def _randomize_outliers(s, t_out, seed):
    """Replace distilled outlier rows with a fresh random sample of equal size."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(t_out), len(s.s_out_images), replace=False)
    r = replace(s)
    r.extra = dict(s.extra, s_out="random")
    r.s_out_images = np.array(t_out.images[idx], dtype=np.float32)
    r.corruption_assignment = None
    r.validate()
    return r


def cmd_ablate(cfg, axis, out_dir=None):
    """Sweep one ablation axis; one report per arm plus ``summary.txt``.

    Returns ``(reports, failures)`` where failures maps arm to error text.
    """
    out_dir = Path(out_dir) if out_dir else cfg.output / f"ablate-{axis}"
    arms = _arms_for(cfg, axis)
    test_in = load_test(cfg)
    test_oods = build_test_oods(cfg, test_in.shape)
    t_in = load_train(cfg)
    reports, failures, distilled = {}, {}, {}
    for name, sub, post in arms:
        try:
            t_out = build_outliers(sub, t_in)
            if post == "random":
                base = distilled[name[:-1] + "D"]
                sets = [_randomize_outliers(s, t_out, sub["experiment.seed"] * 1000 + 700 + r)
                        for r, s in enumerate(base)]
                for r, s in enumerate(sets):
                    save_distilled(s, out_dir / name / f"run{r}", extra={"config_sha256": sub.checksum})
            else:
                dirs = cmd_distill(sub, out_dir / name, t_in, t_out)
                sets = [load_distilled(d) for d in dirs]
                distilled[name] = sets
            reports[name] = evaluate_sets(sub, sets, test_in, test_oods)
            write_report({name: reports[name]}, out_dir / name / "report",
                         header=f"config_sha256={sub.checksum}")
        except (TrustDDError, ValueError) as exc:
            log.error("arm %s failed: %s", name, exc)
            failures[name] = str(exc)
    if reports:
        (out_dir / "summary.txt").write_text(summary_text(reports, cfg["eval.scores"], cfg.checksum))
    return reports, failures


def summary_text(reports, scores, checksum=None):
    lines = [f"# config_sha256={checksum}"] if checksum else []
    lines.append("arm | score | FPR95 | AUROC | AUPR-IN | AUPR-OUT | InD accuracy")
    for arm, report in reports.items():
        for score in scores:
            m = report.mean_row(score)
            lines.append(f"{arm} | {score} | {100 * m['fpr95']:.2f} | {100 * m['auroc']:.2f} | "
                         f"{100 * m['aupr_in']:.2f} | {100 * m['aupr_out']:.2f} | "
                         f"{100 * report.ind_accuracy:.2f}")
    return "\n".join(lines) + "\n"


def cmd_forge(cfg, out_dir=None):
    """Write the configured outlier training pool as a reusable container."""
    out_dir = Path(out_dir) if out_dir else cfg.output / "outliers"
    if cfg.outlier_mode == "none":
        raise ConfigError("outliers.mode=none: nothing to forge")
    t_out = build_outliers(cfg, load_train(cfg))
    save_unlabeled(t_out, out_dir, extra={"config_sha256": cfg.checksum})
    return out_dir


def _tag_rank(tag):
    return TAG_ORDER.index(tag) if tag in TAG_ORDER else len(TAG_ORDER)


def grid_layout(s):
    """Rows of tile indices: ``("in", i)`` per class, then ``("out", j)`` per corruption tag."""
    rows = [[("in", i) for i in np.flatnonzero(s.s_in_labels == c)] for c in range(s.num_classes)]
    n_out = len(s.s_out_images)
    if n_out:
        tags = s.corruption_assignment
        if tags:
            for tag in sorted(dict.fromkeys(tags), key=lambda t: (_tag_rank(t), t)):
                rows.append([("out", j) for j, t in enumerate(tags) if t == tag])
        else:
            width = max(s.ipc, 1)
            rows += [[("out", j) for j in range(k, min(k + width, n_out))] for k in range(0, n_out, width)]
    return rows


def to_bytes(x):
    """[0, 1] floats to 0..255 with round-half-even."""
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def cmd_export_grid(distilled_dir, out_path, gap=1):
    """Tile a distilled set into a binary PGM (1 channel) or PPM (3 channels)."""
    distilled_dir = Path(distilled_dir)
    s = load_distilled(distilled_dir)
    checksum = _read_manifest(distilled_dir).get("config_sha256", "unknown")
    c, h, w = s.shape
    if c not in (1, 3):
        raise ConfigError(f"grid export supports 1 or 3 channels, not {c}")
    rows = grid_layout(s)
    cols = max(len(r) for r in rows)
    height, width = len(rows) * (h + gap) - gap, cols * (w + gap) - gap
    canvas = np.full((c, height, width), 255, dtype=np.uint8)
    for ri, row in enumerate(rows):
        for ci, (kind, idx) in enumerate(row):
            img = s.s_in_images[idx] if kind == "in" else s.s_out_images[idx]
            y, x = ri * (h + gap), ci * (w + gap)
            canvas[:, y:y + h, x:x + w] = to_bytes(img)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n# config_sha256={checksum}\n{width} {height}\n255\n".encode()
    body = canvas[0] if c == 1 else canvas.transpose(1, 2, 0)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_bytes(header + np.ascontiguousarray(body).tobytes())
    except OSError as exc:
        raise ConfigError(f"cannot write grid to {out_path}: {exc}") from exc
    return out_path


def cmd_report(report_dirs, scores=("msp",)):
    """Mean-row summary across report directories (each holding ``cells.txt``)."""
    lines = ["report | arm | score | FPR95 | AUROC | AUPR-IN | AUPR-OUT | InD accuracy"]
    for d in report_dirs:
        cells = read_cells(Path(d) / "cells.txt")
        arms = sorted({k.split(".", 1)[0] for k in cells})
        for arm in arms:
            for score in scores:
                key = f"{arm}.mean.{score}."
                if key + "auroc" not in cells:
                    continue
                vals = [100 * cells[key + m] for m in ("fpr95", "auroc", "aupr_in", "aupr_out")]
                lines.append(f"{d} | {arm} | {score} | " + " | ".join(f"{v:.2f}" for v in vals)
                             + f" | {100 * cells[f'{arm}.ind_accuracy']:.2f}")
    return "\n".join(lines) + "\n"


__all__ = [
    "ExperimentConfig", "SCHEMA", "parse_config", "load_config", "worker_count",
    "cmd_distill", "cmd_eval", "cmd_ablate", "cmd_forge", "cmd_export_grid", "cmd_report",
    "build_outliers", "build_test_oods", "evaluate_sets", "format_table", "PartialReportError",
]
