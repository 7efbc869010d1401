import math

import numpy as np
import pytest

from sinkclust import autodiff as ad
from sinkclust.losses import (
    ClusterModel,
    combined_loss,
    kmeans_loss,
    ot_cluster_loss,
    soft_kmeans_assign,
    soft_kmeans_loss,
)
from sinkclust.errors import ContractError
from sinkclust.nn import Autoencoder, reconstruction_loss
from sinkclust.sinkhorn import SinkhornConfig, exact_lp_oracle, sinkhorn

from conftest import central_diff, max_rel_err
from helpers import random_simplex


def loop_kmeans_loss(z, mu):
    total = 0.0
    for x in z:
        total += min(float(np.sum((x - m) ** 2)) for m in mu)
    return total


class TestKmeansLoss:
    def test_points_on_centers(self, rng):
        mu = rng.normal(size=(3, 4))
        assert kmeans_loss(mu[[0, 2, 1, 1]], mu) == 0.0

    def test_hand(self):
        assert kmeans_loss([[0.0], [2.0]], [[0.0], [3.0]]) == 1.0

    def test_loop_oracle(self, rng):
        for _ in range(10):
            z, mu = rng.normal(size=(20, 3)), rng.normal(size=(4, 3))
            assert kmeans_loss(z, mu) == pytest.approx(loop_kmeans_loss(z, mu), rel=1e-12)


class TestSoftAssign:
    def test_equal_costs_uniform(self):
        np.testing.assert_allclose(soft_kmeans_assign(np.full((2, 4), 3.0), 0.1), np.full((2, 4), 1 / 8))

    def test_hand(self):
        eps = 0.05
        np.testing.assert_allclose(soft_kmeans_assign([[0.0, eps * math.log(9)]], eps), [[0.9, 0.1]],
                                   rtol=1e-14)

    def test_one_hot_limit(self, rng):
        cost = rng.random((6, 4))
        pi = soft_kmeans_assign(cost, 1e-6)
        onehot = np.zeros_like(cost)
        onehot[np.arange(6), cost.argmin(axis=1)] = 1 / 6
        assert np.max(np.abs(pi - onehot)) < 1e-9

    def test_rows_sum_to_one_over_n(self, rng):
        cost = rng.random((11, 5)) * 100
        np.testing.assert_allclose(soft_kmeans_assign(cost, 1e-2).sum(axis=1), 1 / 11, rtol=1e-15)

    def test_matches_sinkhorn_without_column_updates(self, rng):
        for _ in range(5):
            cost = rng.random((9, 4)) * 3
            p = sinkhorn(cost, np.full(4, 0.25), SinkhornConfig(0.3, 1, update_columns=False))
            assert np.max(np.abs(p.plan - soft_kmeans_assign(cost, 0.3))) <= 1e-12

    def test_bad_epsilon(self):
        with pytest.raises(ContractError):
            soft_kmeans_assign([[0.0]], 0.0)


class TestSoftLoss:
    def test_small_epsilon_approaches_kmeans(self, rng):
        # soft k-means carries the 1/n row mass, so compare with the averaged hard loss
        z, mu = rng.normal(size=(15, 2)), rng.normal(size=(3, 2))
        v = soft_kmeans_loss(z, mu, 1e-6)
        assert abs(v - kmeans_loss(z, mu) / 15) <= 1e-4 * (1 + abs(v))

    def test_single_cluster_closed_form(self, rng):
        n, eps = 7, 0.4
        z, mu = rng.normal(size=(n, 3)), rng.normal(size=(1, 3))
        pi = 1 / n
        expected = np.sum((z - mu) ** 2) / n + eps * n * pi * (math.log(pi) - 1)
        assert soft_kmeans_loss(z, mu, eps) == pytest.approx(expected, rel=1e-13)

    def test_gradient_wrt_centers(self, rng):
        z, mu = rng.normal(size=(8, 2)), rng.normal(size=(3, 2))
        tape = ad.Tape()
        m = tape.leaf(mu)
        grad = tape.backward(soft_kmeans_loss(tape.constant(z), m, 0.5))[m]
        assert max_rel_err(grad, central_diff(lambda: soft_kmeans_loss(z, mu, 0.5), mu)) < 1e-4

    def test_gradient_wrt_embedding(self, rng):
        z, mu = rng.normal(size=(8, 2)), rng.normal(size=(3, 2))
        tape = ad.Tape()
        e = tape.leaf(z)
        grad = tape.backward(soft_kmeans_loss(e, tape.constant(mu), 0.5))[e]
        assert max_rel_err(grad, central_diff(lambda: soft_kmeans_loss(z, mu, 0.5), z)) < 1e-4


class TestOtClusterLoss:
    def test_small_epsilon_matches_lp(self, rng):
        # nearest-center assignment is exactly balanced: two points per center
        mu = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        z = np.repeat(mu, 2, axis=0) + rng.normal(scale=0.3, size=(6, 2))
        cost = ((z[:, None] - mu[None]) ** 2).sum(-1)
        assert np.array_equal(np.bincount(cost.argmin(axis=1)), [2, 2, 2])
        model = ClusterModel.uniform(mu)
        v = ot_cluster_loss(z, model, SinkhornConfig(1e-6, 2000, 1e-9))
        _, objective = exact_lp_oracle(cost, model.proportions)
        assert abs(v - objective) <= 1e-3 * (1 + abs(v))

    def test_perfect_matching_leaves_entropy(self, rng):
        mu = rng.normal(size=(4, 3)) * 10
        eps = 1.0
        v, plan = ot_cluster_loss(mu, ClusterModel.uniform(mu), SinkhornConfig(eps, 500, 1e-12),
                                  return_plan=True)
        p = np.exp(plan.log_plan.value)
        cost = ((mu[:, None] - mu[None]) ** 2).sum(-1)
        assert np.sum(cost * p) < 1e-12
        # plan is the identity scaled by 1/n: entropy term is eps * (-log n - 1)
        assert v == pytest.approx(eps * (-math.log(4) - 1), abs=1e-12)

    def test_gradient_wrt_centers(self, rng):
        z, mu = rng.normal(size=(6, 2)), rng.normal(size=(3, 2))
        w = random_simplex(rng, 3)
        cfg = SinkhornConfig(0.5, 200, 1e-14)
        tape = ad.Tape()
        m = tape.leaf(mu)
        loss = ot_cluster_loss(tape.constant(z), ClusterModel(mu, w), cfg, centers=m)
        grad = tape.backward(loss)[m]
        fd = central_diff(lambda: ot_cluster_loss(z, ClusterModel(mu, w), cfg), mu)
        assert max_rel_err(grad, fd) < 1e-4

    def test_lower_bound_by_unconstrained(self, rng):
        eps = 1e-3
        for _ in range(10):
            z, mu = rng.normal(size=(6, 2)), rng.normal(size=(2, 2))
            model = ClusterModel.uniform(mu)
            v = ot_cluster_loss(z, model, SinkhornConfig(eps, 5000, 1e-9))
            assert v >= kmeans_loss(z, mu) / 6 - eps * 6 * 2


def test_permutation_equivariance(rng):
    z, mu = rng.normal(size=(12, 3)), rng.normal(size=(3, 3))
    perm = rng.permutation(12)
    model = ClusterModel.uniform(mu)
    cfg = SinkhornConfig(0.2, 300, 1e-12)
    assert kmeans_loss(z[perm], mu) == pytest.approx(kmeans_loss(z, mu), rel=1e-13)
    assert soft_kmeans_loss(z[perm], mu, 0.2) == pytest.approx(soft_kmeans_loss(z, mu, 0.2), rel=1e-12)
    assert ot_cluster_loss(z[perm], model, cfg) == pytest.approx(ot_cluster_loss(z, model, cfg), rel=1e-10)


class TestCombined:
    @pytest.fixture
    def setup(self, rng):
        ae = Autoencoder.init((6, 4, 2), seed=3)
        x = rng.random((10, 6))
        model = ClusterModel.uniform(rng.normal(size=(2, 2)))
        return ae, x, model, SinkhornConfig(0.5, 100, 1e-10)

    def test_lambda_zero(self, setup):
        ae, x, model, cfg = setup
        loss, _ = combined_loss(x, ae, model, cfg, lam=0.0)
        assert loss.item() == pytest.approx(reconstruction_loss(ae, x), rel=1e-14)

    def test_lambda_one_additive(self, setup):
        ae, x, model, cfg = setup
        from sinkclust.nn import encoder_forward
        loss, _ = combined_loss(x, ae, model, cfg, lam=1.0)
        expected = reconstruction_loss(ae, x) + ot_cluster_loss(encoder_forward(ae, x), model, cfg)
        assert abs(loss.item() - expected) <= 1e-12 * max(1.0, abs(expected))

    def test_gradient_of_sum(self, setup):
        ae, x, model, cfg = setup
        loss, parts = combined_loss(x, ae, model, cfg)
        tape = parts["tape"]
        leaves = parts["params"] + [parts["centers"]]
        g_total = tape.backward(loss)
        g_r = tape.backward(parts["recon"])
        g_c = tape.backward(parts["cluster"])
        for leaf in leaves:
            np.testing.assert_allclose(g_total[leaf], g_r[leaf] + g_c[leaf], rtol=1e-12, atol=1e-14)
