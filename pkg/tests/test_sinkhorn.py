import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sinkclust import autodiff as ad
from sinkclust.errors import ContractError, NumericalInstabilityError, SizeError
from sinkclust.sinkhorn import (
    SinkhornConfig,
    exact_lp_oracle,
    ot_loss,
    ot_loss_grad_envelope,
    ot_loss_on_tape,
    sinkhorn,
    sinkhorn_log_domain,
    sinkhorn_on_tape,
)

from conftest import central_diff, max_rel_err
from helpers import balanced_assignment_objectives, random_simplex

STD = dict(mode="standard")


def test_zero_cost_gives_product_of_marginals():
    for mode in ("standard", "log"):
        p = sinkhorn(np.zeros((2, 2)), [0.5, 0.5], SinkhornConfig(1.0, mode=mode))
        np.testing.assert_allclose(p.plan, [[0.25, 0.25], [0.25, 0.25]], atol=1e-15)


def test_huge_epsilon_spreads_by_proportions(rng):
    cost = rng.random((2, 2)) * 5
    p = sinkhorn(cost, [0.3, 0.7], SinkhornConfig(1e6, **STD))
    np.testing.assert_allclose(p.plan, [[0.15, 0.35], [0.15, 0.35]], atol=1e-3)


def test_small_epsilon_log_domain_matches_lp(rng):
    # n*w must be integral for the oracle, so n=6 with three clusters
    while True:
        cost, w = rng.random((6, 3)), np.full(3, 1 / 3)
        objs = balanced_assignment_objectives(cost, w)
        if objs[1] - objs[0] > 1e-2:
            break
    objs = balanced_assignment_objectives(cost, w)
    assert objs[1] - objs[0] > 1e-2
    plan, objective = exact_lp_oracle(cost, w)
    p = sinkhorn_log_domain(cost, w, SinkhornConfig(1e-3, max_iterations=20000, tolerance=1e-8))
    assert np.max(np.abs(p.plan - plan)) < 1e-3
    assert abs(ot_loss(p, cost, 1e-3) - objective) < 1e-2


def test_plan_factorizes_as_scalings_times_kernel(rng):
    cost = rng.random((5, 3))
    w = random_simplex(rng, 3)
    p = sinkhorn(cost, w, SinkhornConfig(0.5, 500, 1e-12, **STD))
    rebuilt = p.scaling_a[:, None] * np.exp(-cost / 0.5) * p.scaling_b[None, :]
    np.testing.assert_allclose(p.plan, rebuilt, rtol=1e-13)
    assert np.all(p.plan >= 0)


class TestLogDomain:
    def test_agrees_with_standard(self, rng):
        for _ in range(10):
            n, k = rng.integers(2, 30), rng.integers(2, 6)
            cost = rng.random((n, k)) * 3
            w = random_simplex(rng, k)
            cfg = SinkhornConfig(0.2, 2000, 1e-13)
            s = sinkhorn(cost, w, SinkhornConfig(0.2, 2000, 1e-13, **STD))
            lg = sinkhorn_log_domain(cost, w, cfg)
            assert np.max(np.abs(s.plan - lg.plan)) < 1e-10
            assert s.iterations_run == lg.iterations_run

    def test_large_cost_small_epsilon(self):
        # rows whose cheapest entry is 50 underflow to an all-zero kernel row
        cost = np.array([[0.0, 100.0], [100.0, 0.0], [50.0, 100.0], [100.0, 50.0]])
        w = [0.5, 0.5]
        with pytest.raises(NumericalInstabilityError, match="log"):
            sinkhorn(cost, w, SinkhornConfig(1e-2, **STD))
        p = sinkhorn_log_domain(cost, w, SinkhornConfig(1e-2))
        assert np.all(np.isfinite(p.plan))
        assert p.converged and p.marginal_violation <= 1e-6

    def test_zero_cost(self):
        p = sinkhorn_log_domain(np.zeros((2, 2)), [0.5, 0.5], SinkhornConfig(1.0))
        np.testing.assert_allclose(p.plan, np.full((2, 2), 0.25), atol=1e-15)


class TestOtLoss:
    def test_uniform_zero_cost(self):
        n, k, eps = 3, 4, 0.1
        p = sinkhorn(np.zeros((n, k)), np.full(k, 1 / k), SinkhornConfig(eps))
        assert ot_loss(p, np.zeros((n, k)), eps) == pytest.approx(eps * (-np.log(n * k) - 1), abs=1e-14)

    def test_single_cell(self):
        p = sinkhorn([[2.5]], [1.0], SinkhornConfig(0.3))
        np.testing.assert_allclose(p.plan, [[1.0]])
        assert ot_loss(p, [[2.5]], 0.3) == pytest.approx(2.5 - 0.3, abs=1e-14)

    def test_zero_entry_rejected(self):
        with pytest.raises(ContractError):
            ot_loss(np.array([[0.5, 0.0], [0.0, 0.5]]), np.zeros((2, 2)), 0.1)

    def test_cost_only_flag(self, rng):
        cost = rng.random((4, 2))
        p = sinkhorn(cost, [0.5, 0.5], SinkhornConfig(0.5))
        assert ot_loss(p, cost, 0.5, cost_only=True) == pytest.approx(np.sum(cost * p.plan))


class TestEnvelopeGradient:
    def test_matches_finite_differences(self, rng):
        cost = rng.random((5, 3))
        w = random_simplex(rng, 3)
        cfg = SinkhornConfig(0.3, 5000, 1e-14)

        def value():
            return ot_loss(sinkhorn(cost, w, cfg), cost, cfg.epsilon)

        grad = ot_loss_grad_envelope(sinkhorn(cost, w, cfg))
        assert max_rel_err(grad, central_diff(value, cost)) < 1e-4

    def test_matches_unrolled_tape(self, rng):
        cost = rng.random((6, 3))
        w = random_simplex(rng, 3)
        cfg = SinkhornConfig(0.3, 5000, 1e-12)
        p = sinkhorn(cost, w, cfg)
        assert p.marginal_violation <= 1e-10
        tape = ad.Tape()
        c = tape.leaf(cost)
        loss, taped = ot_loss_on_tape(c, w, cfg)
        unrolled = tape.backward(loss)[c]
        np.testing.assert_allclose(unrolled, ot_loss_grad_envelope(p), atol=1e-5, rtol=0)

    def test_zero_cost_uniform(self):
        p = sinkhorn(np.zeros((2, 3)), np.full(3, 1 / 3), SinkhornConfig(1.0))
        np.testing.assert_allclose(ot_loss_grad_envelope(p), np.full((2, 3), 1 / 6), atol=1e-15)

    def test_unconverged_rejected(self, rng):
        p = sinkhorn(rng.random((5, 3)) * 10, np.full(3, 1 / 3), SinkhornConfig(1e-2, 1, 1e-12))
        assert not p.converged
        with pytest.raises(ContractError):
            ot_loss_grad_envelope(p)

    def test_envelope_node_on_tape(self, rng):
        cost = rng.random((4, 2))
        cfg = SinkhornConfig(0.5, 5000, 1e-12, gradient="envelope")
        tape = ad.Tape()
        c = tape.leaf(cost)
        loss, plan = ot_loss_on_tape(c, [0.5, 0.5], cfg)
        np.testing.assert_allclose(tape.backward(loss)[c], plan.plan)


class TestExactOracle:
    def test_diagonal_free(self):
        plan, obj = exact_lp_oracle([[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5])
        np.testing.assert_array_equal(plan, [[0.5, 0.0], [0.0, 0.5]])
        assert obj == 0.0

    def test_counts_force_one_point_per_cluster(self):
        plan, obj = exact_lp_oracle([[0.0, 0.0], [0.0, 1.0]], [0.5, 0.5])
        np.testing.assert_array_equal(plan, [[0.0, 0.5], [0.5, 0.0]])
        assert obj == 0.0

    def test_balanced_vs_unconstrained(self, rng):
        for _ in range(20):
            cost = rng.random((4, 2))
            _, obj = exact_lp_oracle(cost, [0.5, 0.5])
            assert obj == pytest.approx(balanced_assignment_objectives(cost, [0.5, 0.5])[0])
            nearest = cost.argmin(axis=1)
            unconstrained = cost.min(axis=1).sum() / 4
            assert obj >= unconstrained - 1e-15
            balanced = np.bincount(nearest, minlength=2).tolist() == [2, 2]
            assert (abs(obj - unconstrained) < 1e-15) == balanced

    def test_non_integral_counts(self):
        with pytest.raises(ContractError):
            exact_lp_oracle(np.zeros((5, 3)), np.full(3, 1 / 3))

    def test_too_large(self):
        with pytest.raises(SizeError):
            exact_lp_oracle(np.zeros((9, 3)), np.full(3, 1 / 3))


class TestContracts:
    @pytest.mark.parametrize("w", [[0.5, 0.6], [1.0, 0.0], [-0.1, 1.1], [0.5]])
    def test_bad_proportions(self, w):
        with pytest.raises(ContractError):
            sinkhorn(np.zeros((3, 2)), w)

    def test_bad_config(self):
        with pytest.raises(ContractError):
            SinkhornConfig(epsilon=0.0)
        with pytest.raises(ContractError):
            SinkhornConfig(max_iterations=0)
        with pytest.raises(ContractError):
            SinkhornConfig(mode="fast")

    def test_non_finite_cost(self):
        with pytest.raises(ContractError):
            sinkhorn([[np.inf, 0.0]], [0.5, 0.5])


# -- properties ---------------------------------------------------------------

instances = st.tuples(st.integers(2, 40), st.integers(1, 6), st.floats(0.05, 5.0),
                      st.integers(0, 2**31 - 1))


@settings(max_examples=40, deadline=None)
@given(instances)
def test_marginals_hold_at_convergence(inst):
    n, k, eps, seed = inst
    rng = np.random.default_rng(seed)
    cost, w = rng.random((n, k)) * 2, random_simplex(rng, k)
    p = sinkhorn(cost, w, SinkhornConfig(eps, 10000, 1e-9))
    assert p.converged
    assert np.max(np.abs(p.plan.sum(axis=1) - 1 / n)) <= 1e-9
    assert np.max(np.abs(p.plan.sum(axis=0) - w)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(instances)
def test_violation_non_increasing_every_ten_iterations(inst):
    n, k, eps, seed = inst
    rng = np.random.default_rng(seed)
    cost, w = rng.random((n, k)) * 2, random_simplex(rng, k)
    p = sinkhorn(cost, w, SinkhornConfig(eps / 10, 300, 1e-15))
    checkpoints = p.history[9::10]
    assert all(b <= a * (1 + 1e-9) + 1e-15 for a, b in zip(checkpoints, checkpoints[1:]))


@settings(max_examples=30, deadline=None)
@given(instances, st.integers(-3, 3))
def test_scaling_consistency(inst, power):
    n, k, eps, seed = inst
    rng = np.random.default_rng(seed)
    cost, w = rng.random((n, k)), random_simplex(rng, k)
    lam = 2.0 ** power  # exact in floating point, so C/eps is bit-identical
    a = sinkhorn(cost, w, SinkhornConfig(eps, 200, 1e-9))
    b = sinkhorn(lam * cost, w, SinkhornConfig(lam * eps, 200, 1e-9))
    np.testing.assert_array_equal(a.plan, b.plan)
    c = sinkhorn(3.7 * cost, w, SinkhornConfig(3.7 * eps, 200, 1e-9))
    np.testing.assert_allclose(a.plan, c.plan, rtol=1e-12, atol=1e-15)


def test_epsilon_to_infinity(rng):
    for _ in range(20):
        n, k = int(rng.integers(2, 50)), int(rng.integers(1, 8))
        cost, w = rng.random((n, k)) * 10, random_simplex(rng, k)
        p = sinkhorn(cost, w, SinkhornConfig(1e6 * cost.max(), 100, 1e-12, **STD))
        assert np.max(np.abs(p.plan - np.outer(np.full(n, 1 / n), w))) < 1e-3


def test_taped_standard_and_log_agree(rng):
    cost, w = rng.random((7, 3)), random_simplex(rng, 3)
    plans = []
    for mode in ("standard", "log"):
        tape = ad.Tape()
        c = tape.leaf(cost)
        taped = sinkhorn_on_tape(c, w, SinkhornConfig(0.3, 1000, 1e-12, mode=mode))
        plans.append(np.exp(taped.log_plan.value))
    np.testing.assert_allclose(plans[0], plans[1], atol=1e-12)
    np.testing.assert_allclose(plans[1], sinkhorn_log_domain(cost, w, SinkhornConfig(0.3, 1000, 1e-12)).plan,
                               atol=1e-14)
