import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsevi import ias, oracle, problems
from sparsevi.model import GammaHyperprior, LinearProblem, Point, StopRule, energy


def scalar_problem(y=2.0):
    return LinearProblem([[1.0]], [y], 1.0)


class TestUpdateU:
    def test_scalar_hand_value(self):
        P = scalar_problem()
        for method in ("direct", "kalman"):
            np.testing.assert_allclose(ias.update_u(P, np.array([1.0]), method), [1.0], rtol=1e-14)

    def test_direct_and_kalman_agree(self):
        rng = np.random.default_rng(0)
        P = LinearProblem(rng.normal(size=(30, 60)), rng.normal(size=30), rng.uniform(0.1, 1, 30))
        theta = rng.uniform(0.01, 3, 60)
        a = ias.update_u(P, theta, "direct")
        b = ias.update_u(P, theta, "kalman")
        np.testing.assert_allclose(b, a, rtol=1e-8, atol=1e-10 * np.max(np.abs(a)))

    def test_normal_equation_residual(self):
        rng = np.random.default_rng(1)
        P = LinearProblem(rng.normal(size=(20, 50)), rng.normal(size=20), 0.1)
        theta = rng.uniform(0.1, 2, 50)
        for method in ("direct", "kalman"):
            u = ias.update_u(P, theta, method)
            res = (P.gram + np.diag(1 / theta)) @ u - P.rhs
            assert np.linalg.norm(res) <= 1e-8 * np.linalg.norm(P.rhs)

    def test_auto_picks_kalman_when_wide(self):
        assert ias.choose_method(LinearProblem(np.ones((3, 7)), np.ones(3))) == "kalman"
        assert ias.choose_method(LinearProblem(np.ones((3, 6)), np.ones(3))) == "direct"

    def test_rejects_nonpositive_theta(self):
        with pytest.raises(ValueError):
            ias.update_u(scalar_problem(), np.array([0.0]))


class TestUpdateTheta:
    @pytest.mark.parametrize("alpha, bt, u, expected", [
        (1.0, 1.0, 0.0, 1.0),
        (2.0, 1.0, 2.0, 1 + np.sqrt(5)),
        (1.0, 0.0, np.sqrt(2), 1.0),
    ])
    def test_hand_values(self, alpha, bt, u, expected):
        th = ias.update_theta(GammaHyperprior.from_beta_tilde(alpha, bt), np.array([u]))
        np.testing.assert_allclose(th, [expected], rtol=1e-14)

    def test_zero_u_with_zero_beta_tilde_is_error(self):
        with pytest.raises(ValueError):
            ias.update_theta(GammaHyperprior.from_beta_tilde(1.0, 0.0), np.array([0.0]))

    @given(st.floats(-1e3, 1e3), st.floats(1e-3, 10), st.floats(1e-6, 10))
    @settings(max_examples=100, deadline=None)
    def test_is_critical_point(self, u, alpha, bt):
        # d/dtheta [u^2/(2 theta) + theta/alpha - bt ln theta] = 0
        th = ias.update_theta(GammaHyperprior.from_beta_tilde(alpha, bt), np.array([u]))[0]
        grad = -u * u / (2 * th * th) + 1 / alpha - bt / th
        scale = u * u / (2 * th * th) + 1 / alpha + bt / th
        assert abs(grad) <= 1e-10 * scale


class TestSolve:
    def test_zero_data_fixed_point(self):
        pr = GammaHyperprior.from_beta_tilde(0.7, 2.0)
        res = ias.solve(scalar_problem(0.0), pr, theta0=np.array([5.0]))
        np.testing.assert_allclose(res.point.u, 0.0, atol=1e-14)
        np.testing.assert_allclose(res.point.theta, 0.7 * 2.0, rtol=1e-12)

    def test_one_sweep_by_hand(self):
        # theta0 = 1: u = y/2 = 1; theta = alpha (bt/2 + sqrt(bt^2/4 + u^2/(2 alpha)))
        pr = GammaHyperprior.from_beta_tilde(1.0, 1.0)
        res = ias.solve(scalar_problem(), pr, stop=StopRule(max_iter=1))
        np.testing.assert_allclose(res.point.u, [1.0], rtol=1e-14)
        np.testing.assert_allclose(res.point.theta, [0.5 + np.sqrt(0.75)], rtol=1e-14)
        assert not res.converged and res.reason == "max_iter"

    def test_rejects_small_beta(self):
        with pytest.raises(ValueError):
            ias.solve(scalar_problem(), GammaHyperprior(1.0, 1.5))

    def test_energy_trace_monotone_and_residuals(self):
        rng = np.random.default_rng(3)
        P = LinearProblem(rng.normal(size=(15, 40)), rng.normal(size=15), 0.05)
        pr = GammaHyperprior.from_beta_tilde(0.5, 0.1)
        res = ias.solve(P, pr)
        J = np.array([t[1] for t in res.energy_trace])
        assert np.all(np.diff(J) <= 0)
        assert res.converged
        assert max(ias.fixed_point_residuals(P, pr, res.point)) < 1e-6

    def test_hierarchical_stabilizes_quickly(self):
        b = problems.gen_hierarchical(0)
        pr = GammaHyperprior.from_beta_tilde(1.0, 1e-5)
        res = ias.solve(b.problem, pr, stop=StopRule(max_iter=30))
        J = np.array([t[1] for t in res.energy_trace])
        assert np.all(np.diff(J) < 0)
        # after ~10 sweeps the remaining decrease is a small fraction of the total
        assert (J[10] - J[-1]) < 0.05 * (J[0] - J[-1])

    def test_matches_dense_grid_d2(self):
        rng = np.random.default_rng(4)
        P = LinearProblem(rng.uniform(0.5, 1.5, (3, 2)), rng.normal(size=3), 0.5)
        pr = GammaHyperprior.from_beta_tilde(0.4, 1.0)
        res = ias.solve(P, pr)
        u, th = res.point.u, res.point.theta
        h = 2e-3
        offs = h * np.arange(-12, 13)
        axes = [u[0] + offs, u[1] + offs, th[0] + offs, th[1] + offs]
        grid = oracle.dense_grid_posterior(P, pr, axes)
        assert np.all(np.abs(grid.argmax - res.point.stacked()) <= grid.cell_widths + 1e-12)

    def test_callback_and_serialization(self):
        seen = []
        pr = GammaHyperprior.from_beta_tilde(1.0, 1.0)
        res = ias.solve(scalar_problem(), pr, callback=lambda k, z: seen.append(k))
        assert seen == list(range(1, res.iterations + 1))
        back = ias.IasResult.from_dict(res.to_dict())
        np.testing.assert_array_equal(back.point.u, res.point.u)
        assert back.converged == res.converged and back.energy_trace == [tuple(t) for t in res.energy_trace]


class TestHessian:
    def test_scalar_blocks(self):
        pr = GammaHyperprior.from_beta_tilde(1.0, 1.0)
        H = ias.hessian(scalar_problem(), pr, Point([1.0], [1.0]))
        np.testing.assert_allclose(H, [[2, -1], [-1, 2]])
        lap = ias.laplace(scalar_problem(), pr, Point([1.0], [1.0]))
        np.testing.assert_allclose(lap.cov, np.array([[2, 1], [1, 2]]) / 3, rtol=1e-14)

    def test_zero_u_decouples(self):
        rng = np.random.default_rng(5)
        P = LinearProblem(rng.normal(size=(4, 3)), rng.normal(size=4), 1.0)
        H = ias.hessian(P, GammaHyperprior(1.0, 2.0), Point(np.zeros(3), np.ones(3)))
        np.testing.assert_array_equal(H[:3, 3:], 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            d = int(rng.integers(2, 8))
            P = LinearProblem(rng.normal(size=(d + 2, d)), rng.normal(size=d + 2), rng.uniform(0.3, 1, d + 2))
            pr = GammaHyperprior(rng.uniform(0.5, 2, d), rng.uniform(1.6, 4))
            z = Point(rng.normal(size=d), rng.uniform(0.3, 2, d))
            H = ias.hessian(P, pr, z)
            F = oracle.finite_diff_hessian(P, pr, z)
            assert np.linalg.norm(H - F) <= 1e-4 * np.linalg.norm(H)

    @given(st.floats(-20, 20), st.floats(1e-3, 10), st.floats(1e-6, 5), st.floats(0.0, 3.0))
    @settings(max_examples=100, deadline=None)
    def test_positive_definite_for_positive_beta_tilde(self, u, theta, bt, a):
        # Schur complement in u is gram + beta_tilde / (u^2 + beta_tilde theta) > 0
        P = LinearProblem([[a]], [1.0], 1.0)
        H = ias.hessian(P, GammaHyperprior.from_beta_tilde(1.0, bt), Point([u], [theta]))
        assert np.linalg.det(H) > 0 and H[0, 0] > 0

    def test_laplace_along_iterates_converges(self):
        rng = np.random.default_rng(7)
        P = LinearProblem(rng.normal(size=(6, 4)), rng.normal(size=6), 0.2)
        pr = GammaHyperprior.from_beta_tilde(1.0, 0.5)
        covs = []
        ias.solve(P, pr, stop=StopRule(max_iter=60, param_rtol=0.0),
                  callback=lambda k, z: covs.append(ias.laplace(P, pr, z).cov))
        steps = [np.max(np.abs(b - a)) for a, b in zip(covs, covs[1:])]
        assert steps[-1] < 1e-8 * np.max(np.abs(covs[-1]))
        assert steps[-1] < steps[0]

    def test_laplace_pd_at_limit(self):
        rng = np.random.default_rng(8)
        P = LinearProblem(rng.uniform(0.5, 1.5, (3, 2)), rng.normal(size=3), 0.5)
        pr = GammaHyperprior.from_beta_tilde(0.4, 1.0)
        lap = ias.laplace(P, pr, ias.solve(P, pr).point)
        assert np.all(np.linalg.eigvalsh(lap.cov) > 0)
        assert energy(P, pr, ias.solve(P, pr).point)[0] < energy(P, pr, Point(lap.u_mean + 0.01, lap.mean[2:]))[0]
