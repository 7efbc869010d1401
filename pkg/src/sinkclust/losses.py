"""Clustering losses: hard k-means, soft k-means, regularized OT, and the
combined autoencoder objective.

Scale note: :func:`kmeans_loss` is a plain sum over points, while the soft
k-means and OT losses put mass ``1/n`` on each point and are therefore
averages. The two families differ by a factor of ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Var, as_matrix, pairwise_sqdist
from .errors import ContractError, ShapeError
from .sinkhorn import SinkhornConfig, check_proportions, ot_loss_on_tape

if TYPE_CHECKING:
    from .nn import Autoencoder


@dataclass
class ClusterModel:
    """``K`` centers in the embedding space plus target cluster proportions."""

    centers: np.ndarray
    proportions: np.ndarray

    def __post_init__(self):
        self.centers = as_matrix(self.centers)
        if self.centers.shape[0] < 1:
            raise ContractError("need at least one center")
        self.proportions = check_proportions(self.proportions, self.centers.shape[0])

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def uniform(cls, centers) -> "ClusterModel":
        centers = as_matrix(centers)
        k = centers.shape[0]
        return cls(centers, np.full(k, 1.0 / k))


def kmeans_loss(embedded, centers) -> float:
    """Sum over points of the squared distance to the nearest center."""
    return float(pairwise_sqdist(embedded, centers).min(axis=1).sum())


def soft_kmeans_assign(cost, epsilon: float) -> np.ndarray:
    """Row-softmin of ``-C/eps`` scaled so each row sums to ``1/n``."""
    cost = as_matrix(cost)
    if not epsilon > 0:
        raise ContractError("epsilon must be > 0")
    n = cost.shape[0]
    z = -cost / epsilon
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / (n * e.sum(axis=1, keepdims=True))


def _soft_log_assign(cost: Var, epsilon: float) -> Var:
    n = cost.shape[0]
    scaled = ad.scale(cost, -1.0 / epsilon)
    return scaled - ad.logsumexp(scaled, axis=1) + (-math.log(n))


def _regularized_value(cost: Var, log_plan: Var, epsilon: float, cost_only: bool = False) -> Var:
    plan = ad.exp(log_plan)
    loss = ad.total_sum(cost * plan)
    if not cost_only:
        loss = loss + ad.scale(ad.total_sum(plan * (log_plan - 1.0)), epsilon)
    return loss


def _as_var(tape: ad.Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def _tape_of(*xs) -> ad.Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return ad.Tape()


def soft_kmeans_loss(embedded, centers, epsilon: float, cost_only: bool = False):
    """Row-constrained regularized OT value at its closed-form optimum.

    Accepts arrays (returns a float) or tape variables (returns a 1x1 node).
    """
    taped = isinstance(embedded, Var) or isinstance(centers, Var)
    tape = _tape_of(embedded, centers)
    cost = pairwise_sqdist(_as_var(tape, embedded), _as_var(tape, centers))
    loss = _regularized_value(cost, _soft_log_assign(cost, epsilon), epsilon, cost_only)
    return loss if taped else loss.item()


def ot_cluster_loss(embedded, model: ClusterModel, cfg: SinkhornConfig = SinkhornConfig(),
                    centers: Var | None = None, return_plan: bool = False):
    """Regularized OT loss between the embedded batch and ``model``.

    Pass ``centers`` as a tape variable to differentiate with respect to the
    centers; otherwise ``model.centers`` enters as a constant.
    """
    taped = isinstance(embedded, Var) or centers is not None
    tape = _tape_of(embedded, centers)
    mu = centers if centers is not None else tape.constant(model.centers)
    if mu.shape != model.centers.shape:
        raise ShapeError(f"centers shape {mu.shape} != model shape {model.centers.shape}")
    cost = pairwise_sqdist(_as_var(tape, embedded), mu)
    loss, plan = ot_loss_on_tape(cost, model.proportions, cfg)
    out = loss if taped else loss.item()
    return (out, plan) if return_plan else out


def combined_loss(batch, autoencoder: "Autoencoder", model: ClusterModel,
                  cfg: SinkhornConfig = SinkhornConfig(), lam: float = 1.0):
    """Reconstruction loss plus ``lam`` times the OT clustering loss on one tape.

    Returns ``(loss, parts)`` where ``parts`` holds the tape, the parameter and
    center leaves, the two component nodes, and the Sinkhorn diagnostics.
    """
    tape = ad.Tape()
    params = autoencoder.on_tape(tape)
    mu = tape.leaf(model.centers)
    x = tape.constant(batch)
    z = autoencoder.encode(params, x)
    recon = autoencoder.reconstruction_from_embedding(params, x, z)
    cluster, plan = ot_cluster_loss(z, model, cfg, centers=mu, return_plan=True)
    loss = recon + ad.scale(cluster, lam)
    return loss, {"tape": tape, "params": params, "centers": mu,
                  "recon": recon, "cluster": cluster, "plan": plan}
