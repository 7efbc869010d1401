"""Independent oracles shared by several test modules."""

import itertools

import numpy as np


def balanced_assignment_objectives(cost, w):
    """Sorted objectives ``sum_i C[i, a_i] / n`` over all assignments with exact counts ``n * w``."""
    n, k = cost.shape
    target = np.rint(n * np.asarray(w)).astype(int)
    rows = np.arange(n)
    return sorted(cost[rows, a].sum() / n for a in itertools.product(range(k), repeat=n)
                  if np.array_equal(np.bincount(a, minlength=k), target))


def random_unique_lp_instance(rng, min_gap=1e-2, max_n=8, max_k=3):
    """Random uniform-proportion instance whose LP optimum beats the runner-up by ``min_gap``."""
    while True:
        k = int(rng.integers(2, max_k + 1))
        n = k * int(rng.integers(1, max_n // k + 1))
        cost = rng.random((n, k))
        w = np.full(k, 1.0 / k)
        objs = balanced_assignment_objectives(cost, w)
        if len(objs) == 1 or objs[1] - objs[0] >= min_gap:
            return cost, w


def nearest_center_loop(points, centers):
    out = []
    for x in points:
        best, best_k = np.inf, -1
        for k, c in enumerate(centers):
            d = float(np.sum((x - c) ** 2))
            if d < best:
                best, best_k = d, k
        out.append(best_k)
    return np.array(out)


def random_simplex(rng, k, floor=0.02):
    w = rng.dirichlet(np.ones(k) * 2.0)
    w = np.maximum(w, floor)
    return w / w.sum()
