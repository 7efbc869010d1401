"""Unsupervised accuracy via cluster-to-class matching, and Welch's t-test."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError


def confusion_matrix(true_labels, cluster_indices, k: int | None = None) -> np.ndarray:
    """``counts[c, j]`` = number of points with class ``c`` placed in cluster ``j``.

    The matrix is square with side ``max(k, #classes, #clusters)``.
    """
    y = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    c = np.asarray(cluster_indices, dtype=np.int64).reshape(-1)
    if y.shape != c.shape:
        raise ContractError(f"{y.size} labels but {c.size} cluster indices")
    if y.size and (y.min() < 0 or c.min() < 0):
        raise ContractError("labels and cluster indices must be non-negative")
    side = max(k or 0, int(y.max(initial=-1)) + 1, int(c.max(initial=-1)) + 1)
    counts = np.zeros((side, side), dtype=np.int64)
    np.add.at(counts, (y, c), 1)
    return counts


def _min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method, O(K^3).

    Returns ``col`` with ``col[r]`` the column assigned to row ``r``.
    """
    k = cost.shape[0]
    inf = math.inf
    u = np.zeros(k + 1)
    v = np.zeros(k + 1)
    match = np.zeros(k + 1, dtype=np.int64)  # match[j] = row (1-based) owning column j
    way = np.zeros(k + 1, dtype=np.int64)
    for i in range(1, k + 1):
        match[0] = i
        j0 = 0
        minv = np.full(k + 1, inf)
        used = np.zeros(k + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = inf, 0
            for j in range(1, k + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j], way[j] = cur, j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(k + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    col = np.empty(k, dtype=np.int64)
    for j in range(1, k + 1):
        col[match[j] - 1] = j - 1
    return col


def _max_value(weights: np.ndarray) -> float:
    if weights.shape[0] == 0:
        return 0.0
    col = _min_cost_assignment(-weights)
    return float(weights[np.arange(weights.shape[0]), col].sum())


def hungarian_max(weights) -> np.ndarray:
    """Permutation ``sigma`` maximizing ``sum_c weights[c, sigma[c]]``.

    Among optimal permutations the lexicographically smallest is returned.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ContractError("weights must be finite")
    k = w.shape[0]
    best = _max_value(w)
    tol = 1e-9 * max(1.0, float(np.abs(w).sum()))
    rows, cols = list(range(k)), list(range(k))
    sigma = np.empty(k, dtype=np.int64)
    acc = 0.0
    # Fix rows in order, taking the smallest column that still admits an optimum.
    for r in range(k):
        rest_rows = rows[r + 1:]
        for c in cols:
            rest_cols = [x for x in cols if x != c]
            value = acc + w[r, c] + _max_value(w[np.ix_(rest_rows, rest_cols)])
            if value >= best - tol:
                sigma[r] = c
                acc += w[r, c]
                cols = rest_cols
                break
    return sigma


def clustering_accuracy(true_labels, cluster_indices) -> float:
    """Fraction of points whose class matches their cluster under the best
    one-to-one cluster-to-class mapping."""
    y = np.asarray(true_labels).reshape(-1)
    counts = confusion_matrix(true_labels, cluster_indices)
    if y.size == 0:
        raise ContractError("accuracy of an empty labelling")
    sigma = hungarian_max(counts)
    return float(counts[np.arange(counts.shape[0]), sigma].sum() / y.size)


# -- Welch's t-test ------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ContractError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, dof: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``dof`` degrees of freedom."""
    if not dof > 0:
        raise ContractError("degrees of freedom must be positive")
    return betainc_regularized(dof / 2.0, 0.5, dof / (dof + t * t))


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float, float]:
    """Welch's unequal-variance t-test.

    Returns ``(t, dof, p)`` with a two-sided p-value and Welch-Satterthwaite
    degrees of freedom.

    Raises
    ------
    ContractError
        If either sample has fewer than two values, or both have zero variance.
    """
    a = np.asarray(sample_a, dtype=np.float64).reshape(-1)
    b = np.asarray(sample_b, dtype=np.float64).reshape(-1)
    if a.size < 2 or b.size < 2:
        raise ContractError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if not se2 > 0:
        raise ContractError("both samples have zero variance; t is undefined")
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    dof = float(se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1)))
    return t, dof, t_sf_two_sided(t, dof)
