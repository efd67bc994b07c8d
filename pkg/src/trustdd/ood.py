"""OOD detection scores, metrics and the multi-run evaluation protocol.

Scores follow one convention: higher means more in-distribution.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import PartialReportError, ValidationError

METRICS = ("fpr95", "auroc", "aupr_in", "aupr_out")
SCORES = ("msp", "mls", "energy")


def msp_score(logits):
    return softmax(np.asarray(logits, dtype=np.float64), axis=1).max(axis=1)


def mls_score(logits):
    return np.asarray(logits, dtype=np.float64).max(axis=1)


def energy_score(logits, temperature=1.0):
    """Negative free energy ``T * logsumexp(logits / T)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    return temperature * logsumexp(logits / temperature, axis=1)


SCORE_FUNCTIONS = {"msp": msp_score, "mls": mls_score, "energy": energy_score}


@dataclass(frozen=True, eq=False)
class ScoreSet:
    in_scores: np.ndarray
    out_scores: np.ndarray
    score_name: str = "msp"
    dataset_pair: tuple = ("in", "out")

    def __post_init__(self):
        a = np.asarray(self.in_scores, dtype=np.float64).ravel()
        b = np.asarray(self.out_scores, dtype=np.float64).ravel()
        if not len(a) or not len(b):
            raise ValidationError("both score arrays must be non-empty")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValidationError("scores must be finite")
        object.__setattr__(self, "in_scores", a)
        object.__setattr__(self, "out_scores", b)


def _as_scoreset(s, out=None):
    return s if isinstance(s, ScoreSet) else ScoreSet(s, out)


def fpr_at_tpr(s, tpr_target=0.95, out_scores=None):
    """Fraction of OOD scores at or above the largest threshold that keeps TPR >= target."""
    s = _as_scoreset(s, out_scores)
    n = len(s.in_scores)
    k = max(1, math.ceil(tpr_target * n))
    while k > 1 and (k - 1) / n >= tpr_target:
        k -= 1
    while k < n and k / n < tpr_target:
        k += 1
    threshold = np.sort(s.in_scores)[::-1][k - 1]
    return float(np.mean(s.out_scores >= threshold))


def auroc(s, out_scores=None):
    """``P(in > out) + 0.5 P(in == out)`` from midranks."""
    s = _as_scoreset(s, out_scores)
    from scipy.stats import rankdata

    n1, n2 = len(s.in_scores), len(s.out_scores)
    ranks = rankdata(np.concatenate([s.in_scores, s.out_scores]))
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def aupr(s, positive="in", out_scores=None):
    """Average precision with step-wise interpolation over distinct thresholds."""
    s = _as_scoreset(s, out_scores)
    if positive == "in":
        pos, neg = s.in_scores, s.out_scores
    elif positive == "out":
        pos, neg = -s.out_scores, -s.in_scores
    else:
        raise ValueError("positive must be 'in' or 'out'")
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    tp = np.cumsum(is_pos)
    fp = np.cumsum(1.0 - is_pos)
    # keep the last position of each tied group
    last = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tp, fp = tp[last], fp[last]
    recall = tp / len(pos)
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def all_metrics(s):
    return {
        "fpr95": fpr_at_tpr(s),
        "auroc": auroc(s),
        "aupr_in": aupr(s, "in"),
        "aupr_out": aupr(s, "out"),
    }


def balance_pair(n_in, n_out, rng):
    """Index arrays subsampling the larger side so both have ``min(n_in, n_out)`` items."""
    n = min(n_in, n_out)
    idx_in = np.sort(rng.permutation(n_in)[:n]) if n_in > n else np.arange(n_in)
    idx_out = np.sort(rng.permutation(n_out)[:n]) if n_out > n else np.arange(n_out)
    return idx_in, idx_out


# ---------------------------------------------------------------------------
# Reports

@dataclass
class OODReport:
    """Per-(OOD set, score) metric means over all evaluations.

    ``evaluations`` keeps one record per trained model so aggregates can be
    recomputed; ``noise_sets`` lists OOD sets left out of the mean row
    unless ``include_noise`` is set.
    """

    rows: dict = field(default_factory=dict)
    ind_accuracy: float = 0.0
    evaluations: list = field(default_factory=list)
    ood_names: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    noise_sets: list = field(default_factory=list)
    include_noise: bool = False
    meta: dict = field(default_factory=dict)

    def mean_row(self, score):
        names = [n for n in self.ood_names if self.include_noise or n not in self.noise_sets]
        return {m: float(np.mean([self.rows[(n, score)][m] for n in names])) for m in METRICS}

    def cells(self):
        out = {"ind_accuracy": self.ind_accuracy}
        for (name, score), row in self.rows.items():
            for m, v in row.items():
                out[f"{name}.{score}.{m}"] = v
        for score in self.scores:
            for m, v in self.mean_row(score).items():
                out[f"mean.{score}.{m}"] = v
        return out


def aggregate(evaluations, ood_names, scores, noise_sets=(), include_noise=False, meta=None):
    """Arithmetic mean over evaluation records of every metric cell."""
    rows = {}
    for name in ood_names:
        for score in scores:
            rows[(name, score)] = {
                m: float(np.mean([e["metrics"][(name, score)][m] for e in evaluations])) for m in METRICS
            }
    acc = float(np.mean([e["accuracy"] for e in evaluations]))
    return OODReport(rows, acc, list(evaluations), list(ood_names), list(scores), list(noise_sets),
                     include_noise, dict(meta or {}))


def evaluate_model(params, spec, test_in, test_oods, scores=SCORES, rng_seed=0, temperature=1.0):
    """Accuracy and every (OOD set, score) metric for one trained network."""
    from .networks import predict_logits

    logits_in = predict_logits(params, test_in.images, spec)
    accuracy = float(np.mean(logits_in.argmax(axis=1) == test_in.labels))
    rng = np.random.default_rng(rng_seed)
    metrics = {}
    for ood in test_oods:
        idx_in, idx_out = balance_pair(len(test_in), len(ood), rng)
        logits_out = predict_logits(params, ood.images[idx_out], spec)
        for score in scores:
            fn = SCORE_FUNCTIONS[score]
            kw = {"temperature": temperature} if score == "energy" else {}
            ss = ScoreSet(fn(logits_in[idx_in], **kw), fn(logits_out, **kw), score, (test_in.name, ood.name))
            metrics[(ood.name, score)] = all_metrics(ss)
    return {"accuracy": accuracy, "metrics": metrics}


def _evaluate_one(job):
    from .networks import train_on_distilled

    run, model, s, spec, hyper, seed, test_in, test_oods, scores, temperature = job
    try:
        params = train_on_distilled(s, spec, hyper, rng_seed=seed)
        record = evaluate_model(params, spec, test_in, test_oods, scores, rng_seed=seed,
                                temperature=temperature)
    except Exception as exc:  # reported per (run, model)
        return run, model, None, repr(exc)
    record.update(run=run, model=model, seed=seed)
    return run, model, record, None


def evaluate_protocol(distilled_runs, spec, test_in, test_oods, scores=SCORES, models_per_run=5,
                      rng_seed=0, hyper=None, workers=1, include_noise=False, temperature=1.0):
    """Train ``models_per_run`` networks on each distilled set and average every metric.

    Model ``m`` is seeded ``rng_seed * 1000 + 100 + m``; the same seed drives
    the 1:1 subsampling of its test pairs.
    """
    for ood in test_oods:
        if ood.shape != test_in.shape:
            raise ValidationError(f"OOD set {ood.name} has shape {ood.shape}, InD is {test_in.shape}")
    jobs = [(r, m, s, spec, hyper, rng_seed * 1000 + 100 + m, test_in, test_oods, tuple(scores), temperature)
            for r, s in enumerate(distilled_runs) for m in range(models_per_run)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate_one, jobs))
    else:
        results = [_evaluate_one(j) for j in jobs]
    failures = [(r, m, err) for r, m, rec, err in results if err is not None]
    if failures:
        raise PartialReportError(
            "model training failed for " + ", ".join(f"(run {r}, model {m}): {e}" for r, m, e in failures),
            failures,
        )
    noise = [o.name for o in test_oods if o.provenance.startswith("noise")]
    return aggregate([rec for _, _, rec, _ in results], [o.name for o in test_oods], list(scores),
                     noise, include_noise)


# ---------------------------------------------------------------------------
# Serialization

METRIC_LABELS = {"fpr95": "FPR95", "auroc": "AUROC", "aupr_in": "AUPR-IN", "aupr_out": "AUPR-OUT"}
ARM_ORDER = ("baseline", "oe", "poe")


def _arm_sort_key(arm):
    return (ARM_ORDER.index(arm) if arm in ARM_ORDER else len(ARM_ORDER), arm)


def format_table(reports, score="msp"):
    """Text table: rows are OOD sets plus the mean, columns metric x arm, values x100."""
    arms = sorted(reports, key=_arm_sort_key)
    first = reports[arms[0]]
    header = ["OOD dataset"] + [f"{METRIC_LABELS[m]}:{arm}" for m in METRICS for arm in arms]
    lines = [f"# score={score}", " | ".join(header)]
    for name in first.ood_names:
        cells = [name] + [f"{100 * reports[a].rows[(name, score)][m]:.2f}" for m in METRICS for a in arms]
        lines.append(" | ".join(cells))
    cells = ["mean"] + [f"{100 * reports[a].mean_row(score)[m]:.2f}" for m in METRICS for a in arms]
    lines.append(" | ".join(cells))
    acc = ["InD accuracy"] + [f"{100 * reports[a].ind_accuracy:.2f}" for a in arms]
    lines.append(" | ".join(acc))
    return "\n".join(lines) + "\n"


def write_report(reports, directory, header=None):
    """Write ``table_<score>.txt`` files and a ``cells.txt`` key-value file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = f"# {header}\n" if header else ""
    first = next(iter(reports.values()))
    for score in first.scores:
        (directory / f"table_{score}.txt").write_text(prefix + format_table(reports, score))
    lines = [f"{arm}.{key}={value!r}"
             for arm in sorted(reports, key=_arm_sort_key) for key, value in reports[arm].cells().items()]
    (directory / "cells.txt").write_text(prefix + "\n".join(lines) + "\n")
    return directory


def read_cells(path):
    cells = {}
    for line in open(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, value = line.split("=", 1)
        cells[key] = float(value)
    return cells
