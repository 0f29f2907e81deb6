import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsevi import oracle, problems, vias
from sparsevi.model import GammaHyperprior, LinearProblem, StopRule
from sparsevi.special import gig_inv_mean, GigParams


def small_problem(seed=0, n=5, d=3, noise=0.3):
    rng = np.random.default_rng(seed)
    return LinearProblem(rng.normal(size=(n, d)), rng.normal(size=n), noise)


class TestUpdates:
    def test_update_r_hand_values(self):
        np.testing.assert_allclose(vias.update_r([1.0, 3.0], np.diag([1.0, 0.25])), [2.0, 9.25])

    def test_update_r_floors_zero(self):
        assert vias.update_r([0.0], [[0.0]])[0] > 0

    def test_shrinkage_weights_hand_values(self):
        # s = 1/2: E[1/theta] = sqrt(b/r)
        st_ = vias.VariationalState([0.0, 0.0], np.eye(2), [1.0, 1.0], 1.0, 0.5)
        np.testing.assert_allclose(vias.shrinkage_weights(st_), [1.0, 1.0], rtol=1e-13)
        st_ = vias.VariationalState([0.0], np.eye(1), [1.0], 4.0, 0.5)
        np.testing.assert_allclose(vias.shrinkage_weights(st_), [2.0], rtol=1e-13)

    @given(st.floats(1e-2, 1e2), st.floats(-0.5, 1.0), st.floats(1e-8, 1e2), st.floats(1.01, 10))
    @settings(max_examples=80, deadline=None)
    def test_weights_decrease_in_r(self, b, s, r, factor):
        lo = gig_inv_mean(GigParams(b, r, s))
        hi = gig_inv_mean(GigParams(b, r * factor, s))
        assert hi < lo

    def test_identity_operator(self):
        y = np.array([1.0, -2.0, 4.0])
        P = LinearProblem(np.eye(3), y, 1.0)
        m, C = vias.update_mc(P, np.ones(3), "direct")
        np.testing.assert_allclose(C, 0.5 * np.eye(3), rtol=1e-14)
        np.testing.assert_allclose(m, 0.5 * y, rtol=1e-14)

    def test_direct_and_woodbury_agree(self):
        rng = np.random.default_rng(1)
        P = LinearProblem(rng.normal(size=(30, 80)), rng.normal(size=30), rng.uniform(0.2, 1, 30))
        ell = rng.uniform(0.1, 10, 80)
        m1, C1 = vias.update_mc(P, ell, "direct")
        m2, C2 = vias.update_mc(P, ell, "woodbury")
        np.testing.assert_allclose(m2, m1, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(C2, C1, rtol=1e-8, atol=1e-12)

    def test_large_weights_pin_components(self):
        P = small_problem()
        m, C = vias.update_mc(P, np.array([1e12, 1.0, 1.0]))
        assert abs(m[0]) < 1e-10 and C[0, 0] < 1e-11

    def test_diagonal_operator_decouples(self):
        a = np.array([1.0, 2.0, 0.5])
        y = np.array([3.0, -1.0, 2.0])
        ell = np.array([0.5, 2.0, 1.0])
        m, C = vias.update_mc(LinearProblem(np.diag(a), y, 1.0), ell)
        np.testing.assert_allclose(np.diag(C), 1 / (a * a + ell), rtol=1e-14)
        np.testing.assert_allclose(m, a * y / (a * a + ell), rtol=1e-14)

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            vias.update_mc(small_problem(), np.array([1.0, 0.0, 1.0]))


class TestElbo:
    def test_matches_manifold_formula(self):
        ATA, yA, s = 2.0, 3.0, -0.4
        a = np.sqrt(ATA)
        y = yA / a
        P = LinearProblem([[a]], [y], 1.0)
        pr = GammaHyperprior(s + 0.5, 0.5)
        for c in np.geomspace(1e-4, 2.0, 20):
            m = c * yA
            state = vias.VariationalState([m], [[c]], [m * m + c], pr.b, pr.s(1))
            diff = vias.elbo(P, pr, state) - oracle.elbo_manifold_1d(ATA, yA, s, c, pr.b)
            assert diff == pytest.approx(-0.5 * y * y, rel=1e-11)

    def test_full_value_matches_monte_carlo(self):
        P = small_problem(2, n=4, d=2)
        pr = GammaHyperprior(0.8, 0.6)
        state = vias.solve(P, pr, stop=StopRule(50)).state
        mc = oracle.elbo_mc(P, pr, state, 400_000, np.random.default_rng(0))
        assert abs(vias.elbo(P, pr, state, include_constants=True) - mc.estimate) < 4 * mc.std_error

    def test_difference_matches_monte_carlo(self):
        P = small_problem(3, n=4, d=2)
        pr = GammaHyperprior(0.8, 0.6)
        res = vias.solve(P, pr, stop=StopRule(40))
        s1 = res.state
        s2 = vias.initial_state(P, pr, m0=[0.3, -0.2], C0=0.5)
        est, se = oracle.elbo_mc_difference(P, pr, s1, s2, 400_000, seed=1)
        exact = vias.elbo(P, pr, s1) - vias.elbo(P, pr, s2)
        assert abs(est - exact) < 4 * se

    def test_r_is_optimal_given_m_and_c(self):
        P = LinearProblem([[1.0]], [2.0], 1.0)
        pr = GammaHyperprior(0.3, 0.5)
        st_ = vias.solve(P, pr).state
        r_opt = vias.update_r(st_.m, st_.C)
        base = vias.VariationalState(st_.m, st_.C, r_opt, st_.b, st_.s)
        v0 = vias.elbo(P, pr, base)
        for dr in (-1e-3, 1e-3):
            moved = vias.VariationalState(st_.m, st_.C, r_opt + dr, st_.b, st_.s)
            assert vias.elbo(P, pr, moved) < v0

    def test_constant_split(self):
        P = small_problem(4)
        pr = GammaHyperprior(0.5, 2.0)
        st_ = vias.initial_state(P, pr)
        full = vias.elbo(P, pr, st_, include_constants=True)
        assert full == pytest.approx(vias.elbo(P, pr, st_) + vias.elbo_constant(P, pr), rel=1e-14)

    def test_rejects_mismatched_prior(self):
        P = small_problem()
        st_ = vias.initial_state(P, GammaHyperprior(0.5, 2.0))
        with pytest.raises(ValueError):
            vias.elbo(P, GammaHyperprior(0.5, 3.0), st_)


class TestSolve:
    def test_elbo_trace_monotone(self):
        b = problems.gen_hierarchical(0, d=60, n=20)
        res = vias.solve(b.problem, GammaHyperprior(0.005, 0.05), stop=StopRule(200))
        v = np.array([t[1] for t in res.elbo_trace])
        assert np.all(np.diff(v) >= -1e-9 * np.abs(v[1:]))

    def test_zero_data_mean_vanishes(self):
        P = LinearProblem(np.random.default_rng(5).normal(size=(4, 3)), np.zeros(4), 1.0)
        res = vias.solve(P, GammaHyperprior(0.5, 1.0))
        np.testing.assert_allclose(res.state.m, 0.0, atol=1e-12)

    def test_sweep_is_idempotent_at_fixed_point(self):
        P = small_problem(6)
        pr = GammaHyperprior(0.7, 1.0)
        res = vias.solve(P, pr, stop=StopRule(2000, 1e-13))
        again = vias.sweep(P, res.state)
        np.testing.assert_allclose(again.m, res.state.m, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(again.C, res.state.C, rtol=1e-10, atol=1e-14)

    def test_woodbury_path_matches_direct(self):
        b = problems.gen_hierarchical(1, d=60, n=20)
        pr = GammaHyperprior(0.005, 0.05)
        a = vias.solve(b.problem, pr, stop=StopRule(30), method="direct").state
        c = vias.solve(b.problem, pr, stop=StopRule(30), method="woodbury").state
        np.testing.assert_allclose(c.m, a.m, rtol=1e-6, atol=1e-10)

    def test_track_elbo_off_records_final_value(self):
        P = small_problem(7)
        pr = GammaHyperprior(0.5, 1.0)
        on = vias.solve(P, pr, stop=StopRule(15, 0.0))
        off = vias.solve(P, pr, stop=StopRule(15, 0.0), track_elbo=False)
        assert off.elbo_trace == [on.elbo_trace[-1]]

    def test_serialization_round_trip(self):
        P = small_problem(8)
        res = vias.solve(P, GammaHyperprior(0.5, 1.0))
        back = vias.ViasResult.from_dict(res.to_dict())
        np.testing.assert_array_equal(back.state.C, res.state.C)
        assert back.iterations == res.iterations and back.converged == res.converged

    def test_rejects_indefinite_start(self):
        with pytest.raises(ValueError):
            vias.solve(small_problem(), GammaHyperprior(0.5, 1.0), C0=-1.0)
