"""Lloyd's k-means with k-means++ seeding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import as_matrix, pairwise_sqdist
from .errors import ContractError, ShapeError


@dataclass
class KmeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    history: list[float] = field(default_factory=list, repr=False)


def assign_nearest(points, centers) -> np.ndarray:
    """Index of the nearest center per point; ties go to the lowest index."""
    return np.argmin(pairwise_sqdist(points, centers), axis=1)


def kmeanspp_init(points, k: int, rng_seed: int = 0) -> np.ndarray:
    """D^2-weighted sequential seeding."""
    points = as_matrix(points)
    n = points.shape[0]
    if k < 1 or n < k:
        raise ContractError(f"need 1 <= K <= n, got K={k}, n={n}")
    rng = np.random.default_rng(rng_seed)
    chosen = [int(rng.integers(n))]
    d2 = pairwise_sqdist(points, points[chosen]).ravel()
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a chosen center
            idx = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
        chosen.append(idx)
        d2 = np.minimum(d2, pairwise_sqdist(points, points[idx:idx + 1]).ravel())
    return points[chosen].copy()


def lloyd(points, initial_centers, max_iter: int = 300, tol: float = 1e-8) -> KmeansResult:
    """Alternate nearest-center assignment and mean updates.

    Stops at an assignment fixpoint, when the objective decreases by less
    than ``tol``, or after ``max_iter`` center updates. ``iterations`` counts
    updates that moved at least one center. An emptied cluster is re-seeded
    at the point farthest from its current center.
    """
    points = as_matrix(points)
    centers = as_matrix(initial_centers).copy()
    if points.shape[1] != centers.shape[1]:
        raise ShapeError(f"feature dims differ: {points.shape[1]} vs {centers.shape[1]}")
    k = centers.shape[0]
    dist = pairwise_sqdist(points, centers)
    assign = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(len(assign)), assign].sum())
    history = [inertia]
    iterations = 0
    for _ in range(max_iter):
        new = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = points[assign == j].mean(axis=0)
        taken = set()
        for j in np.flatnonzero(counts == 0):
            own = dist[np.arange(len(assign)), assign].copy()
            own[list(taken)] = -1.0
            far = int(np.argmax(own))
            taken.add(far)
            new[j] = points[far]
        if np.array_equal(new, centers):
            break
        centers = new
        iterations += 1
        dist = pairwise_sqdist(points, centers)
        new_assign = np.argmin(dist, axis=1)
        new_inertia = float(dist[np.arange(len(new_assign)), new_assign].sum())
        history.append(new_inertia)
        fixpoint = np.array_equal(new_assign, assign)
        assign, decrease, inertia = new_assign, inertia - new_inertia, new_inertia
        if fixpoint or decrease < tol:
            break
    return KmeansResult(centers, assign, inertia, iterations, history)


def kmeans(points, k: int, seed: int = 0, n_init: int = 1, max_iter: int = 300,
           tol: float = 1e-8) -> KmeansResult:
    """Best of ``n_init`` runs of k-means++ seeding followed by Lloyd iterations.

    Restart ``r`` seeds with ``seed + r``; the lowest inertia wins, earliest on ties.
    """
    best = None
    for r in range(max(1, n_init)):
        result = lloyd(points, kmeanspp_init(points, k, seed + r), max_iter=max_iter, tol=tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best
