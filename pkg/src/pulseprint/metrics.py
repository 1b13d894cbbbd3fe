"""Evaluation metrics: ranking scores, embedding rank, dispersion.

All functions are pure and operate on plain numpy arrays in float64.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import rankdata


def _check_binary(labels: np.ndarray) -> tuple[int, int]:
    labels = np.asarray(labels)
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    return n_pos, n_neg


def roc_auc(scores, labels) -> float:
    """Probability a positive outranks a negative; ties count one half.

    Computed from midranks, which is exactly the all-pairs statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels)
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(np.sum(ranks[labels == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """ROC polyline (fpr, tpr) from (0,0) to (1,1), tie groups collapsed."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # threshold boundaries: last index of each tie group
    boundary = np.flatnonzero(np.diff(s) != 0)
    idx = np.concatenate([boundary, [len(s) - 1]])
    tp = np.cumsum(y == 1)[idx]
    fp = np.cumsum(y == 0)[idx]
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    return fpr, tpr


def partial_auc(scores, labels, max_fpr: float = 0.1) -> float:
    """Trapezoidal ROC area over FPR in [0, max_fpr], divided by max_fpr."""
    if not 0.0 < max_fpr <= 1.0:
        raise ValueError(f"max_fpr must lie in (0, 1], got {max_fpr}")
    fpr, tpr = roc_points(scores, labels)
    cut = np.searchsorted(fpr, max_fpr, side="right")
    xs = fpr[:cut]
    ys = tpr[:cut]
    if xs[-1] < max_fpr:
        # interpolate the curve at the window edge
        t_edge = np.interp(max_fpr, fpr, tpr)
        xs = np.concatenate([xs, [max_fpr]])
        ys = np.concatenate([ys, [t_edge]])
    return float(trapezoid(ys, xs) / max_fpr)


def mae(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError("prediction/target shape mismatch")
    return float(np.mean(np.abs(predictions - targets)))


def smooth_effective_rank(H) -> float:
    """exp of the entropy of the normalized singular value distribution.

    Equals k for a matrix with k equal nonzero singular values and degrades
    continuously as the spectrum concentrates; 1 means rank collapse.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 2:
        raise ValueError(f"need a [B>=2, D] matrix, got shape {H.shape}")
    s = np.linalg.svd(H, compute_uv=False)
    total = s.sum()
    if total <= 0.0:
        raise ValueError("all-zero matrix has no singular value distribution")
    p = s / total
    p = p[p > 1e-12]
    entropy = -float(np.sum(p * np.log(p)))
    return float(np.exp(entropy))


def batched_effective_rank(H, batch_size: int = 64) -> float:
    """Mean smooth effective rank over consecutive full batches of rows;
    falls back to one batch when fewer rows than batch_size."""
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    if n < batch_size:
        return smooth_effective_rank(H)
    n_batches = n // batch_size
    vals = [smooth_effective_rank(H[b * batch_size:(b + 1) * batch_size])
            for b in range(n_batches)]
    return float(np.mean(vals))


def dispersion_ratio(embeddings, participant_ids) -> tuple[np.ndarray, float]:
    """Per-dimension within/across participant variability ratio.

    ratio_d = sqrt(mean over participants of within-participant variance)
            / sqrt(variance across participants of per-participant means).
    Dimensions whose across-variance is below 1e-12 report +inf.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    pids = np.asarray(participant_ids)
    if X.ndim != 2 or len(pids) != X.shape[0]:
        raise ValueError("embeddings and participant ids must align")
    unique = np.unique(pids)
    if len(unique) < 2:
        raise ValueError("need at least 2 participants")
    means = np.empty((len(unique), X.shape[1]))
    within = np.empty((len(unique), X.shape[1]))
    for i, p in enumerate(unique):
        rows = X[pids == p]
        if rows.shape[0] < 2:
            raise ValueError(f"participant {p} has fewer than 2 segments")
        means[i] = rows.mean(axis=0)
        within[i] = rows.var(axis=0)
    across_var = means.var(axis=0)
    within_mean = within.mean(axis=0)
    ratio = np.full(X.shape[1], np.inf)
    ok = across_var >= 1e-12
    ratio[ok] = np.sqrt(within_mean[ok]) / np.sqrt(across_var[ok])
    return ratio, float(np.mean(ratio))
