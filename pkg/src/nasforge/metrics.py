"""Quality and ranking metrics: log loss, AUC, Kendall's tau-b, Pearson's rho."""

from __future__ import annotations

import math

import numpy as np

LOGLOSS_CLAMP = 1e-7


def log_loss(p, y) -> float:
    """Mean negative log likelihood with probabilities clamped to
    [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic;
    tied scores contribute 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.shape[0], dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.shape[0]:
        j = i
        while j + 1 < x.shape[0] and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def kendall_tau(a, b) -> float:
    """Tau-b: (concordant - discordant) / sqrt((n0 - Ta)(n0 - Tb))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"kendall_tau needs equal-length 1-D inputs, got {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ValueError("kendall_tau needs at least two points")
    da = np.sign(a[:, None] - a[None, :])
    db = np.sign(b[:, None] - b[None, :])
    iu = np.triu_indices(n, k=1)
    prod = da[iu] * db[iu]
    concordant = int((prod > 0).sum())
    discordant = int((prod < 0).sum())
    ties_a = int((da[iu] == 0).sum())
    ties_b = int((db[iu] == 0).sum())
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - ties_a) * (n0 - ties_b))
    if denom == 0:
        raise ValueError("kendall_tau undefined for an all-tied input")
    return float((concordant - discordant) / denom)


def pearson_rho(a, b) -> float:
    """Covariance over the product of standard deviations."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"pearson_rho needs equal-length 1-D inputs, got {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        raise ValueError("pearson_rho undefined when either input is constant")
    return float((da * db).sum() / denom)
