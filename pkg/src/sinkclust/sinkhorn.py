"""Entropic optimal transport between an embedded batch and weighted centers.

The batch carries uniform mass ``1/n`` per point and cluster ``k`` receives
mass ``w[k]``. Solvers return a :class:`TransportPlan` whose rows sum to
``1/n`` and whose columns sum to ``w``.

Two numerically different routes reach the same fixed point:

* :func:`sinkhorn` scales ``exp(-C/eps)`` directly. Fast, but the kernel
  underflows once ``C/eps`` exceeds roughly 700.
* :func:`sinkhorn_log_domain` iterates on the dual potentials with
  log-sum-exp reductions and never forms the unshifted kernel.

:func:`sinkhorn_on_tape` replays the iterations on an autodiff tape so the
loss can be backpropagated through every executed iteration.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Var, as_matrix
from .errors import ContractError, NumericalInstabilityError, SizeError

MODES = ("standard", "log")
GRADIENTS = ("unrolled", "envelope")


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings.

    ``update_columns=False`` skips the column rescaling, which leaves only the
    row constraint active (the soft k-means assignment). ``cost_only`` makes
    the loss report the transport cost without the entropy term.
    """

    epsilon: float = 1e-2
    max_iterations: int = 50
    tolerance: float = 1e-6
    mode: str = "log"
    gradient: str = "unrolled"
    update_columns: bool = True
    cost_only: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ContractError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ContractError("tolerance must be > 0")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gradient not in GRADIENTS:
            raise ContractError(f"gradient must be one of {GRADIENTS}, got {self.gradient!r}")


@dataclass
class TransportPlan:
    plan: np.ndarray
    scaling_a: np.ndarray
    scaling_b: np.ndarray
    iterations_run: int
    marginal_violation: float
    converged: bool
    log_plan: np.ndarray
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape


def check_proportions(w, k: Optional[int] = None) -> np.ndarray:
    """Validate a strictly positive simplex vector and return it as 1-D."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if k is not None and w.shape[0] != k:
        raise ContractError(f"expected {k} proportions, got {w.shape[0]}")
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ContractError("proportions must be finite and strictly positive")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ContractError(f"proportions must sum to 1, got {w.sum()!r}")
    return w


def _check_inputs(cost, w) -> tuple[np.ndarray, np.ndarray]:
    cost = as_matrix(cost)
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    return cost, check_proportions(w, cost.shape[1])


def _violation(plan: np.ndarray, w: np.ndarray, columns: bool) -> float:
    n = plan.shape[0]
    rows = np.max(np.abs(plan.sum(axis=1) - 1.0 / n))
    if not columns:
        return float(rows)
    cols = np.max(np.abs(plan.sum(axis=0) - w))
    return float(max(rows, cols))


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(cost, w, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Alternating row/column scaling of ``exp(-C/eps)`` starting from ``b = 1``.

    Dispatches to :func:`sinkhorn_log_domain` when ``cfg.mode == "log"``.

    Raises
    ------
    NumericalInstabilityError
        If the scalings leave the finite range in standard mode.
    """
    if cfg.mode == "log":
        return sinkhorn_log_domain(cost, w, cfg)
    cost, w = _check_inputs(cost, w)
    n, k = cost.shape
    eps = cfg.epsilon
    kernel = np.exp(-cost / eps)
    a = np.full(n, 1.0 / n)
    b = np.ones(k)
    history = []
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for it in range(1, cfg.max_iterations + 1):
            a = (1.0 / n) / (kernel @ b)
            if cfg.update_columns:
                b = w / (kernel.T @ a)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))
                    and np.all(a > 0) and np.all(b > 0)):
                raise NumericalInstabilityError(
                    f"standard Sinkhorn left the finite range at iteration {it} "
                    f"(eps={eps:g}, max cost={cost.max():g}); use mode='log'")
            plan = a[:, None] * kernel * b[None, :]
            history.append(_violation(plan, w, cfg.update_columns))
            if history[-1] <= cfg.tolerance:
                break
        log_plan = np.log(plan)
    return TransportPlan(plan, a, b, it, history[-1], history[-1] <= cfg.tolerance,
                         log_plan, history)


def sinkhorn_log_domain(cost, w, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Sinkhorn on the potentials ``f = eps log a`` and ``g = eps log b``."""
    cost, w = _check_inputs(cost, w)
    n, k = cost.shape
    eps = cfg.epsilon
    log_w = np.log(w)
    log_row = -math.log(n)
    f = np.zeros(n)
    g = np.zeros(k)
    history = []
    for it in range(1, cfg.max_iterations + 1):
        f = eps * log_row - eps * _lse((g[None, :] - cost) / eps, axis=1)
        if cfg.update_columns:
            g = eps * log_w - eps * _lse((f[:, None] - cost) / eps, axis=0)
        log_plan = (f[:, None] + g[None, :] - cost) / eps
        plan = np.exp(log_plan)
        history.append(_violation(plan, w, cfg.update_columns))
        if history[-1] <= cfg.tolerance:
            break
    with np.errstate(over="ignore", under="ignore"):
        a, b = np.exp(f / eps), np.exp(g / eps)
    return TransportPlan(plan, a, b, it, history[-1], history[-1] <= cfg.tolerance,
                         log_plan, history)


def ot_loss(plan, cost, epsilon: float, cost_only: bool = False) -> float:
    """Regularized transport objective ``<C, P> + eps * sum P (log P - 1)``."""
    cost = as_matrix(cost)
    if isinstance(plan, TransportPlan):
        p, log_p = plan.plan, plan.log_plan
    else:
        p = as_matrix(plan)
        if np.any(p <= 0):
            raise ContractError("plan has non-positive entries")
        log_p = np.log(p)
    if p.shape != cost.shape:
        raise ContractError(f"plan shape {p.shape} != cost shape {cost.shape}")
    transport = float(np.sum(cost * p))
    if cost_only:
        return transport
    if not np.all(np.isfinite(log_p)):
        raise ContractError("plan has zero entries; entropy term undefined")
    return transport + epsilon * float(np.sum(p * (log_p - 1.0)))


def ot_loss_grad_envelope(plan: TransportPlan) -> np.ndarray:
    """Gradient of the optimal regularized value with respect to the cost.

    At the Sinkhorn fixed point the value function's derivative in ``C`` is
    the plan itself.
    """
    if not plan.converged:
        raise ContractError(
            f"envelope gradient needs a converged plan "
            f"(marginal violation {plan.marginal_violation:.3g})")
    return plan.plan.copy()


def exact_lp_oracle(cost, w) -> tuple[np.ndarray, float]:
    """Exhaustive hard-assignment OT for tiny instances.

    Enumerates every assignment of the ``n`` points with exactly ``n * w[k]``
    points in cluster ``k``. Ties keep the lexicographically first assignment.
    """
    cost, w = _check_inputs(cost, w)
    n, k = cost.shape
    if n > 8 or k > 4:
        raise SizeError(f"exact oracle limited to n<=8, K<=4, got n={n}, K={k}")
    counts = n * w
    target = np.rint(counts).astype(int)
    if np.any(np.abs(counts - target) > 1e-9):
        raise ContractError(f"n * w must be integral, got {counts}")
    best, best_assign = math.inf, None
    rows = np.arange(n)
    for assign in itertools.product(range(k), repeat=n):
        if np.any(np.bincount(assign, minlength=k) != target):
            continue
        value = cost[rows, assign].sum() / n
        if value < best:
            best, best_assign = value, assign
    plan = np.zeros((n, k))
    plan[rows, best_assign] = 1.0 / n
    return plan, float(best)


# -- tape ----------------------------------------------------------------------

@dataclass
class TapedPlan:
    """Result of :func:`sinkhorn_on_tape`: the log-plan node plus diagnostics."""

    log_plan: Var
    iterations_run: int
    marginal_violation: float
    converged: bool


def sinkhorn_on_tape(cost: Var, w, cfg: SinkhornConfig = SinkhornConfig()) -> TapedPlan:
    """Run Sinkhorn with every iteration recorded on ``cost``'s tape.

    The stopping decision is read from the forward values, so the recorded
    graph is exactly the iterations that executed.
    """
    _, w = _check_inputs(cost.value, w)
    tape = cost.tape
    n, k = cost.shape
    eps = cfg.epsilon
    if cfg.mode == "log":
        log_w = tape.constant(np.log(w)[None, :])
        g = tape.constant(np.zeros((1, k)))
        for it in range(1, cfg.max_iterations + 1):
            f = ad.scale(ad.logsumexp((g - cost) / eps, axis=1), -eps) + eps * -math.log(n)
            if cfg.update_columns:
                g = ad.scale(log_w - ad.logsumexp((f - cost) / eps, axis=0), eps)
            log_plan = (f + g - cost) / eps
            viol = _violation(np.exp(log_plan.value), w, cfg.update_columns)
            if viol <= cfg.tolerance:
                break
        return TapedPlan(log_plan, it, viol, viol <= cfg.tolerance)

    kernel = ad.exp(ad.scale(cost, -1.0 / eps))
    b = tape.constant(np.ones((k, 1)))
    w_col = tape.constant(w[:, None])
    for it in range(1, cfg.max_iterations + 1):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            a = (1.0 / n) / (kernel @ b)
            if cfg.update_columns:
                b = w_col / (kernel.T @ a)
        av, bv = a.value, b.value
        if not (np.all(np.isfinite(av)) and np.all(np.isfinite(bv))
                and np.all(av > 0) and np.all(bv > 0)):
            raise NumericalInstabilityError(
                f"standard Sinkhorn left the finite range at iteration {it}; use mode='log'")
        plan = a * kernel * b.T
        viol = _violation(plan.value, w, cfg.update_columns)
        if viol <= cfg.tolerance:
            break
    return TapedPlan(ad.log(plan), it, viol, viol <= cfg.tolerance)


def ot_loss_on_tape(cost: Var, w, cfg: SinkhornConfig = SinkhornConfig()) -> tuple[Var, TapedPlan | TransportPlan]:
    """Regularized OT loss as a 1x1 tape node, differentiable in ``cost``.

    With ``cfg.gradient == "envelope"`` the solver runs off-tape and the node's
    adjoint is the converged plan.
    """
    eps = cfg.epsilon
    if cfg.gradient == "envelope":
        tp = sinkhorn(cost.value, w, cfg)
        grad = ot_loss_grad_envelope(tp)
        value = ot_loss(tp, cost.value, eps, cost_only=cfg.cost_only)
        node = cost.tape.record(np.array([[value]]), (cost,), lambda g: (g[0, 0] * grad,))
        return node, tp
    taped = sinkhorn_on_tape(cost, w, cfg)
    plan = ad.exp(taped.log_plan)
    loss = ad.total_sum(cost * plan)
    if not cfg.cost_only:
        loss = loss + ad.scale(ad.total_sum(plan * (taped.log_plan - 1.0)), eps)
    return loss, taped
