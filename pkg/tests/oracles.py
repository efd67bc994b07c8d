"""Brute-force reference implementations used only by the tests."""
import itertools

import numpy as np


def auroc_pairwise(in_scores, out_scores):
    wins = 0.0
    for a in in_scores:
        for b in out_scores:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(in_scores) * len(out_scores))


def fpr_sweep(in_scores, out_scores, tpr=0.95):
    candidates = np.unique(np.concatenate([in_scores, out_scores, [np.inf, -np.inf]]))
    best = -np.inf
    for d in candidates:
        if np.mean(in_scores >= d) >= tpr and d > best:
            best = d
    return float(np.mean(out_scores >= best))


def aupr_enumerate(in_scores, out_scores, positive="in"):
    if positive == "in":
        pos, neg = np.asarray(in_scores), np.asarray(out_scores)
    else:
        pos, neg = -np.asarray(out_scores), -np.asarray(in_scores)
    thresholds = sorted(set(pos.tolist()) | set(neg.tolist()), reverse=True)
    total, prev_recall = 0.0, 0.0
    for t in thresholds:
        tp = float(np.sum(pos >= t))
        fp = float(np.sum(neg >= t))
        recall = tp / len(pos)
        precision = tp / (tp + fp)
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


def patch_bookkeeping(h, w, rows, cols, perm):
    """Index grid after moving patch perm[k] into raster slot k."""
    idx = np.arange(h * w).reshape(h, w)
    ph, pw = h // rows, w // cols
    patches = [idx[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] for r, c in itertools.product(range(rows), range(cols))]
    out = np.empty_like(idx)
    for k, (r, c) in enumerate(itertools.product(range(rows), range(cols))):
        out[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] = patches[perm[k]]
    return out


def central_difference(f, x, h=1e-4, indices=None):
    """Central finite differences of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    grad = np.zeros_like(flat)
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def max_relative_error(analytic, numeric, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def auroc_pairwise_np(in_scores, out_scores):
    """Same O(n^2) pair count as :func:`auroc_pairwise`, broadcast in numpy."""
    a = np.asarray(in_scores, dtype=np.float64)[:, None]
    b = np.asarray(out_scores, dtype=np.float64)[None, :]
    return float(np.mean((a > b) + 0.5 * (a == b)))
