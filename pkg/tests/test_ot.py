import numpy as np
import pytest

from otfpf import ops
from otfpf.autodiff import Parameter, Tensor
from otfpf.errors import DataError, ShapeError
from otfpf.ot import (CostMatrix, DiscreteMeasure, SinkhornConfig,
                      entropy, exact_ot_small, sinkhorn, sinkhorn_plan,
                      transport_cost)

from tests.conftest import numerical_grad, relative_error


def random_instance(rng, n, m):
    a = rng.dirichlet(np.ones(n))
    b = rng.dirichlet(np.ones(m))
    C = rng.uniform(0.0, 1.0, size=(n, m))
    return a, b, C


class TestDomainTypes:
    def test_measure_rejects_negative(self):
        with pytest.raises(DataError):
            DiscreteMeasure(np.array([1.2, -0.2]))

    def test_measure_rejects_unnormalized(self):
        with pytest.raises(DataError):
            DiscreteMeasure(np.array([0.5, 0.4]))

    def test_measure_renormalizes_float32_roundoff(self):
        w = np.float32([1 / 3, 1 / 3, 1 / 3])
        m = DiscreteMeasure(w)
        assert abs(m.weights.sum() - 1.0) < 1e-15

    def test_cost_rejects_nonfinite(self):
        with pytest.raises(DataError):
            CostMatrix(np.array([[np.inf, 0.0], [0.0, 1.0]]))

    def test_config_validation(self):
        with pytest.raises(DataError):
            SinkhornConfig(epsilon=0.0)
        with pytest.raises(DataError):
            SinkhornConfig(tolerance=0.0)


class TestSinkhorn:
    def test_single_atom(self):
        plan = sinkhorn([1.0], [1.0], [[7.3]])
        np.testing.assert_allclose(plan.plan, [[1.0]], atol=1e-12)
        assert plan.converged

    def test_constant_cost_gives_independent_coupling(self, rng):
        a, b, _ = random_instance(rng, 4, 6)
        C = np.full((4, 6), 2.5)
        plan = sinkhorn(a, b, C, SinkhornConfig(epsilon=0.7))
        np.testing.assert_allclose(plan.plan, np.outer(a, b), atol=1e-8)

    def test_symmetric_closed_form(self):
        eps = 0.1
        plan = sinkhorn([0.5, 0.5], [0.5, 0.5], [[0.0, 1.0], [1.0, 0.0]],
                        SinkhornConfig(epsilon=eps, tolerance=1e-12, max_iterations=500))
        t2 = 0.5 / (1.0 + np.exp(-1.0 / eps))
        expected = np.array([[t2, t2 * np.exp(-1.0 / eps)],
                             [t2 * np.exp(-1.0 / eps), t2]])
        np.testing.assert_allclose(plan.plan, expected, atol=1e-7)
        np.testing.assert_allclose(plan.plan[0, 0], 0.4999773, atol=1e-7)
        np.testing.assert_allclose(plan.plan[0, 1], 0.0000227, atol=1e-7)

    def test_marginal_feasibility_random(self, rng):
        for _ in range(20):
            n, m = rng.integers(2, 12, size=2)
            a, b, C = random_instance(rng, int(n), int(m))
            eps = float(rng.uniform(0.05, 1.0))
            plan = sinkhorn(a, b, C, SinkhornConfig(epsilon=eps, max_iterations=500))
            assert plan.converged
            assert np.abs(plan.plan.sum(axis=1) - a).max() <= 1e-6
            assert np.abs(plan.plan.sum(axis=0) - b).max() <= 2e-6

    def test_large_epsilon_approaches_independent(self, rng):
        a = np.full(64, 1 / 64)
        b = np.full(80, 1 / 80)
        C = rng.uniform(0.0, 1.0, size=(64, 80))
        eps = 1e3 * np.abs(C).max()
        plan = sinkhorn(a, b, C, SinkhornConfig(epsilon=eps, tolerance=1e-12,
                                                max_iterations=2000))
        assert np.abs(plan.plan - np.outer(a, b)).max() <= 1e-6

    def test_small_epsilon_reaches_exact_cost(self, rng):
        for _ in range(5):
            a, b, C = random_instance(rng, 5, 5)
            cfg = SinkhornConfig(epsilon=1e-3, tolerance=1e-9, max_iterations=20000)
            plan = sinkhorn(a, b, C, cfg)
            assert plan.used_log_domain
            _, exact_cost = exact_ot_small(a, b, C)
            gap = plan.achieved_cost - exact_cost
            assert gap >= -1e-7
            assert gap <= 1e-3 * (np.log(5) + np.log(5)) + 1e-6

    def test_cost_shift_invariance(self, rng):
        a, b, C = random_instance(rng, 6, 4)
        cfg = SinkhornConfig(epsilon=0.2, tolerance=1e-10, max_iterations=2000)
        p1 = sinkhorn(a, b, C, cfg)
        p2 = sinkhorn(a, b, C + 5.0, cfg)
        np.testing.assert_allclose(p1.plan, p2.plan, atol=1e-8)
        np.testing.assert_allclose(p2.achieved_cost - p1.achieved_cost, 5.0, atol=1e-7)

    def test_dual_objective_monotone(self, rng):
        for force_log in (False, True):
            a, b, C = random_instance(rng, 7, 5)
            cfg = SinkhornConfig(epsilon=0.1, tolerance=1e-12, max_iterations=300,
                                 log_domain=force_log, check_monotone=True)
            plan = sinkhorn(a, b, C, cfg)
            duals = np.array(plan.dual_objectives)
            assert np.all(np.diff(duals) >= -1e-9)

    def test_underflow_switches_to_log_domain(self, rng):
        a, b, C = random_instance(rng, 4, 4)
        plan = sinkhorn(a, b, C, SinkhornConfig(epsilon=1e-4, max_iterations=5000,
                                                tolerance=1e-8))
        assert plan.used_log_domain
        assert np.all(np.isfinite(plan.plan))

    def test_dimension_mismatch_rejected(self, rng):
        a, b, C = random_instance(rng, 3, 4)
        with pytest.raises(ShapeError):
            sinkhorn(a, b, C[:2])

    def test_reports_stop_reason_when_capped(self, rng):
        a, b, C = random_instance(rng, 6, 6)
        plan = sinkhorn(a, b, C, SinkhornConfig(epsilon=0.05, max_iterations=2,
                                                tolerance=1e-14))
        assert not plan.converged
        assert plan.iterations_used == 2


class TestExactOracle:
    def test_zero_cost_matching(self):
        plan, cost = exact_ot_small([0.5, 0.5], [0.5, 0.5], [[0.0, 1.0], [1.0, 0.0]])
        assert cost == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(plan, np.diag([0.5, 0.5]), atol=1e-9)

    def test_single_row_forced_plan(self):
        plan, cost = exact_ot_small([1.0], [0.3, 0.7], [[2.0, 4.0]])
        assert cost == pytest.approx(3.4, abs=1e-12)
        np.testing.assert_allclose(plan, [[0.3, 0.7]], atol=1e-12)

    def test_independent_coupling_feasibility_bound(self, rng):
        for _ in range(10):
            a, b, C = random_instance(rng, 4, 4)
            _, cost = exact_ot_small(a, b, C)
            assert cost <= (C * np.outer(a, b)).sum() + 1e-9

    def test_rejects_large_instances(self, rng):
        a = np.full(9, 1 / 9)
        b = np.full(9, 1 / 9)
        with pytest.raises(DataError):
            exact_ot_small(a, b, np.zeros((9, 9)))

    def test_matches_sinkhorn_limit_on_2x2(self, rng):
        a, b, C = random_instance(rng, 2, 2)
        _, exact_cost = exact_ot_small(a, b, C)
        plan = sinkhorn(a, b, C, SinkhornConfig(epsilon=5e-4, tolerance=1e-10,
                                                max_iterations=50000))
        assert plan.achieved_cost == pytest.approx(exact_cost, abs=5e-3)


class TestCostAndEntropy:
    def test_single_unit_entry(self):
        P = np.array([[1.0]])
        assert entropy(P) == pytest.approx(1.0)

    def test_zero_matrix_convention(self):
        P = np.zeros((2, 3))
        assert transport_cost(P, np.ones((2, 3))) == 0.0
        assert entropy(P) == 0.0

    def test_uniform_2x2(self, rng):
        P = np.full((2, 2), 0.25)
        C = rng.uniform(0, 1, (2, 2))
        assert transport_cost(P, C) == pytest.approx(C.mean())
        assert entropy(P) == pytest.approx(np.log(4.0) + 1.0)

    def test_negative_entries_rejected(self):
        with pytest.raises(DataError):
            transport_cost(np.array([[-0.1]]), np.array([[1.0]]))
        with pytest.raises(DataError):
            entropy(np.array([[-0.1]]))


class TestDifferentiability:
    @pytest.mark.parametrize("force_log", [False, True])
    def test_transport_cost_gradient_matches_fd(self, rng, force_log):
        n, m = 4, 3
        a = np.full(n, 1 / n)
        b = np.full(m, 1 / m)
        C0 = rng.uniform(0.2, 1.0, size=(n, m)).astype(np.float32)
        cfg = SinkhornConfig(epsilon=0.1 if not force_log else 0.08,
                             max_iterations=60, tolerance=1e-30,
                             log_domain=force_log)

        def loss_np(c_arr):
            ct = Tensor(c_arr)
            P, _ = sinkhorn_plan(ct, a, b, cfg)
            return float(ops.mul(P, ct).sum().data)

        ct = Parameter(C0)
        P, info = sinkhorn_plan(ct, a, b, cfg)
        assert info["iterations"] == 60  # fixed-length unroll for the check
        loss = ops.mul(P, ct).sum()
        loss.backward()
        num = numerical_grad(lambda c: loss_np(c), [C0], 0, step=1e-3)
        assert relative_error(ct.grad, num) <= 1e-3

    def test_batched_plan_matches_per_instance(self, rng):
        a = np.full(5, 0.2)
        b = np.full(4, 0.25)
        costs = rng.uniform(0, 1, size=(3, 5, 4)).astype(np.float32)
        cfg = SinkhornConfig(epsilon=0.1, max_iterations=200, tolerance=1e-10)
        batched, _ = sinkhorn_plan(Tensor(costs), a, b, cfg)
        for i in range(3):
            single = sinkhorn(a, b, costs[i].astype(np.float64), cfg)
            np.testing.assert_allclose(batched.data[i], single.plan, atol=2e-6)
