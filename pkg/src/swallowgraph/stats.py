"""Nonparametric model-comparison statistics over cross-validation folds:
Friedman rank test and pairwise Wilcoxon signed-rank with Holm step-down
correction (exact enumeration for small n).
"""

from __future__ import annotations

from itertools import combinations

import numpy as np
from scipy import stats as sps

WILCOXON_EXACT_MAX_N = 12


class StatsError(ValueError):
    pass


def friedman_test(scores):
    """Friedman chi-square over a folds x models score matrix.

    Ranks within each fold (average ranks for ties), chi-square with
    (models - 1) degrees of freedom. Identical columns give (0, 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise StatsError("need a folds x models matrix with >= 2 models")
    n, k = scores.shape
    if n < 2:
        raise StatsError("need >= 2 folds")
    ranks = np.vstack([sps.rankdata(row) for row in scores])
    mean_ranks = ranks.mean(axis=0)
    statistic = 12.0 * n / (k * (k + 1)) * ((mean_ranks - (k + 1) / 2.0) ** 2).sum()
    # tie correction (reduces the statistic when folds contain tied ranks)
    ties = 0.0
    for row in scores:
        _, counts = np.unique(row, return_counts=True)
        ties += (counts ** 3 - counts).sum()
    denom = 1.0 - ties / (n * k * (k * k - 1))
    if denom <= 0:
        return 0.0, 1.0
    statistic /= denom
    p = float(sps.chi2.sf(statistic, k - 1))
    return float(statistic), p


def _wilcoxon_exact_p(w_obs, ranks):
    """Two-sided exact p by enumerating all sign assignments of the ranks."""
    n = len(ranks)
    total = 0
    count = 0
    w_obs = min(w_obs, sum(ranks) - w_obs)
    for mask in range(1 << n):
        w = sum(r for i, r in enumerate(ranks) if mask >> i & 1)
        w = min(w, sum(ranks) - w)
        total += 1
        if w <= w_obs + 1e-12:
            count += 1
    return count / total


def wilcoxon_signed_rank(a, b):
    """Two-sided Wilcoxon signed-rank p for paired samples.

    Zero differences are dropped; all-zero differences give p = 1. Exact
    enumeration for n <= 12, otherwise the normal approximation with tie
    correction.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return 1.0
    ranks = sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= WILCOXON_EXACT_MAX_N:
        return float(min(1.0, _wilcoxon_exact_p(w_plus, list(ranks))))
    mu = n * (n + 1) / 4.0
    sigma2 = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(ranks, return_counts=True)
    sigma2 -= ((counts ** 3 - counts).sum()) / 48.0
    if sigma2 <= 0:
        return 1.0
    z = (w_plus - mu) / np.sqrt(sigma2)
    return float(min(1.0, 2.0 * sps.norm.sf(abs(z))))


def holm_correction(p_values):
    """Holm step-down: sort ascending, multiply by (m - rank), enforce
    monotonicity, cap at 1. Never decreases a raw p."""
    p = np.asarray(p_values, dtype=np.float64)
    m = len(p)
    order = np.argsort(p)
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        val = (m - rank) * p[idx]
        running = max(running, val)
        adjusted[idx] = min(1.0, running)
    return adjusted


def wilcoxon_holm(scores):
    """All pairwise Wilcoxon tests over a folds x models matrix, Holm
    corrected. Returns a symmetric p matrix (diagonal 1) plus the pair
    list with raw and corrected values."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise StatsError("need a folds x models matrix")
    _, k = scores.shape
    pairs = list(combinations(range(k), 2))
    raw = np.array([wilcoxon_signed_rank(scores[:, i], scores[:, j])
                    for i, j in pairs])
    corrected = holm_correction(raw) if len(raw) else raw
    matrix = np.ones((k, k))
    details = []
    for (i, j), rp, cp in zip(pairs, raw, corrected):
        matrix[i, j] = matrix[j, i] = cp
        details.append({"pair": (i, j), "raw_p": float(rp), "corrected_p": float(cp)})
    return matrix, details
