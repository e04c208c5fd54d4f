import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import optimize

import stratmed as sm
from stratmed.effects import effect_value
from stratmed.em import (
    EmConfig,
    alpha_score_hessian,
    e_step,
    eta_score_jacobian,
    fit,
    m_step_alpha,
    m_step_eta,
    m_step_hazards,
)
from stratmed.errors import InvalidInputError
from stratmed.model_core import (
    BaselineHazard,
    Dataset,
    ParameterSet,
    PosteriorMatrix,
)


def hazards_from(ds, lam1, lam2, lam3):
    v = np.where(ds.delta_m == 1, ds.y - ds.z, -1.0)
    t1 = np.unique(ds.z[ds.delta_m == 1])
    t2 = np.unique(v[(ds.delta_m == 1) & (ds.delta_t == 1)])
    t3 = np.unique(ds.y[(ds.delta_m == 0) & (ds.delta_t == 1)])
    return (
        BaselineHazard(jump_times=t1, jump_sizes=np.full(t1.size, lam1),
                       label="intermediate"),
        BaselineHazard(jump_times=t2, jump_sizes=np.full(t2.size, lam2), label="gap"),
        BaselineHazard(jump_times=t3, jump_sizes=np.full(t3.size, lam3),
                       label="direct"),
    )


def clamped_posteriors(ds, truth):
    post = np.zeros((ds.n, 3))
    post[np.arange(ds.n), truth.u - 1] = 1.0
    return PosteriorMatrix(probs=post)


class TestEStep:
    def test_structural_cases_are_exact(self, small_data, small_fit):
        ds, _ = small_data
        post = e_step(ds, small_fit.params, small_fit.hazards)
        p = post.probs
        dm = ds.delta_m == 1
        dt = ds.delta_t == 1
        a1 = ds.a == 1
        assert np.all(p[dm & a1] == np.array([1.0, 0.0, 0.0]))
        assert np.all(p[dm, 2] == 0.0)
        assert np.all(p[~dm & dt & ~a1] == np.array([0.0, 0.0, 1.0]))
        assert np.all(p[~dm & dt, 0] == 0.0)
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12

    def test_double_censored_matches_bayes_rule(self):
        """Hand-evaluated three-way posterior for one fully censored subject."""
        z = y = 2.0
        x = (0.6,)
        ds = Dataset(ids=["s"], a=[1], z=[z], delta_m=[0], y=[y], delta_t=[0],
                     x=[x])
        params = ParameterSet(
            eta_m1=[0.3, 0.2], eta_r1=[0.0, 0.0], eta_m2=[-0.1, 0.4],
            eta_r2=[0.0, 0.0], eta_t2=[0.2, -0.3], eta_t3=[0.1, 0.5],
            alpha1=[0.4, -0.2], alpha2=[0.1, 0.3])
        hazards = (
            BaselineHazard(jump_times=[1.0, 2.0], jump_sizes=[0.3, 0.4],
                           label="intermediate"),
            BaselineHazard(jump_times=[0.5], jump_sizes=[0.2], label="gap"),
            BaselineHazard(jump_times=[1.5, 2.0], jump_sizes=[0.25, 0.35],
                           label="direct"),
        )
        lam1, lam3 = 0.7, 0.6  # cumulative hazards at z and y
        la1 = 0.4 - 0.2 * x[0]
        la2 = 0.1 + 0.3 * x[0]
        d1 = math.exp(la1 - math.exp(0.3 + 0.2 * x[0]) * lam1)
        d2 = math.exp(la2) * math.exp(-math.exp(0.2 - 0.3 * x[0]) * lam3)
        d3 = math.exp(-math.exp(0.1 + 0.5 * x[0]) * lam3)
        expected = np.array([d1, d2, d3]) / (d1 + d2 + d3)
        post = e_step(ds, params, hazards)
        assert post.probs[0] == pytest.approx(expected, abs=1e-14)


class TestMStepHazards:
    def test_single_subject_unit_jump(self):
        ds = Dataset(ids=["s", "t"], a=[1, 0], z=[1.0, 2.0], delta_m=[1, 1],
                     y=[2.0, 4.0], delta_t=[1, 0], x=[[0.0], [0.0]])
        post = PosteriorMatrix(probs=np.array([[1.0, 0, 0], [1.0, 0, 0]]))
        hz = m_step_hazards(ds, post, ParameterSet.zeros(1))
        # at the first onset time both subjects are at risk, at the second one
        assert hz[0].jump_sizes == pytest.approx([0.5, 1.0])

    def test_nelson_aalen_reduction_all_scales(self, small_data):
        """Unit weights and zero coefficients reduce every jump update to the
        Nelson-Aalen increment on its own time scale."""
        ds, truth = small_data
        zero = ParameterSet.zeros(ds.p)

        sub = ds.subset(np.nonzero(ds.delta_m == 1)[0])
        post = PosteriorMatrix(probs=np.tile([1.0, 0.0, 0.0], (sub.n, 1)))
        hz = m_step_hazards(sub, post, zero)
        for t, lam in zip(hz[0].jump_times, hz[0].jump_sizes):
            na = np.sum(sub.z == t) / np.sum(sub.z >= t)
            assert abs(lam - na) <= 1e-10
        v = sub.y - sub.z
        for t, lam in zip(hz[1].jump_times, hz[1].jump_sizes):
            na = np.sum((v == t) & (sub.delta_t == 1)) / np.sum(v >= t)
            assert abs(lam - na) <= 1e-10

        sub3 = ds.subset(np.nonzero(ds.delta_m == 0)[0])
        post3 = PosteriorMatrix(probs=np.tile([0.0, 0.0, 1.0], (sub3.n, 1)))
        hz3 = m_step_hazards(sub3, post3, zero)
        for t, lam in zip(hz3[2].jump_times, hz3[2].jump_sizes):
            na = np.sum((sub3.y == t) & (sub3.delta_t == 1)) / np.sum(sub3.y >= t)
            assert abs(lam - na) <= 1e-10

    def test_onset_hazard_near_identity_at_truth(self):
        """One exact E-step + M-step at the generative truth recovers the
        linear onset cumulative hazard on the central support."""
        spec = sm.benchmark_spec(10_000, seed=77)
        ds, _ = sm.generate(spec)
        from test_likelihood import truth_step_hazards

        hazards = truth_step_hazards(ds, spec)
        post = e_step(ds, spec.true_params, hazards)
        updated = m_step_hazards(ds, post, spec.true_params)
        h1 = updated[0]
        cum = np.cumsum(h1.jump_sizes)
        for t_target in (0.2, 0.5, 1.0, 2.0):
            k = np.searchsorted(h1.jump_times, t_target, side="right")
            assert cum[k - 1] == pytest.approx(h1.jump_times[k - 1], rel=0.10)


def independent_cox_pair(times, risk_entry, events, rows_w, X_w, rows_x, X_x):
    """Textbook O(n^2) Newton partial-likelihood solver for two coefficient
    blocks over disjoint subject groups sharing one baseline hazard."""
    n, q = X_w.shape
    Z = np.zeros((n, 2 * q))
    Z[rows_w, :q] = X_w[rows_w]
    Z[rows_x, q:] = X_x[rows_x]
    member = (rows_w | rows_x).astype(float)
    beta = np.zeros(2 * q)
    for _ in range(100):
        score = np.zeros(2 * q)
        info = np.zeros((2 * q, 2 * q))
        e = member * risk_entry * np.exp(Z @ beta)
        for i in np.nonzero(events & (member > 0))[0]:
            w = e * (times >= times[i])
            s0 = w.sum()
            s1 = w @ Z
            s2 = (w[:, None] * Z).T @ Z
            score += Z[i] - s1 / s0
            info += s2 / s0 - np.outer(s1, s1) / s0 ** 2
        delta = np.linalg.lstsq(info, score, rcond=None)[0]
        beta = beta + delta
        if np.linalg.norm(score) < 1e-9 * n:
            break
    return beta


def solve_pair_to_fixed_point(ds, pm, block_a, block_b, tol=1e-12):
    params = ParameterSet.zeros(ds.p)
    for _ in range(500):
        ea = m_step_eta(block_a, ds, pm, params=params)
        params = replace(params, **{f"eta_{block_a}": ea})
        eb = m_step_eta(block_b, ds, pm, params=params)
        changed = max(np.max(np.abs(eb - getattr(params, f"eta_{block_b}"))), 0.0)
        params = replace(params, **{f"eta_{block_b}": eb})
        if changed < tol:
            break
    return params


class TestMStepEta:
    def test_reduction_to_partial_likelihood_all_scales(self, small_data):
        """With memberships clamped to the hidden truth, the coefficient
        solves agree with an independent combined-design Cox solver."""
        ds, truth = small_data
        pm = clamped_posteriors(ds, truth)
        w = np.column_stack([ds.a.astype(float), ds.x])
        xt = np.column_stack([np.ones(ds.n), ds.x])

        r1 = 1.0 - ds.delta_t + ds.delta_m * ds.delta_t
        oracle = independent_cox_pair(
            ds.z, r1, ds.delta_m == 1, truth.u == 1, w,
            (truth.u == 2) & (ds.a == 0), xt)
        fitted = solve_pair_to_fixed_point(ds, pm, "m1", "m2")
        assert np.max(np.abs(fitted.eta_m1 - oracle[:3])) < 1e-6
        assert np.max(np.abs(fitted.eta_m2 - oracle[3:])) < 1e-6

        v = np.where(ds.delta_m == 1, ds.y - ds.z, -1.0)
        oracle = independent_cox_pair(
            v, (ds.delta_m == 1).astype(float),
            (ds.delta_m == 1) & (ds.delta_t == 1), truth.u == 1, w,
            (truth.u == 2) & (ds.a == 0), xt)
        fitted = solve_pair_to_fixed_point(ds, pm, "r1", "r2")
        assert np.max(np.abs(fitted.eta_r1 - oracle[:3])) < 1e-6
        assert np.max(np.abs(fitted.eta_r2 - oracle[3:])) < 1e-6

        oracle = independent_cox_pair(
            ds.y, (ds.delta_m == 0).astype(float),
            (ds.delta_m == 0) & (ds.delta_t == 1), truth.u == 3, w,
            (truth.u == 2) & (ds.a == 1), xt)
        fitted = solve_pair_to_fixed_point(ds, pm, "t3", "t2")
        assert np.max(np.abs(fitted.eta_t3 - oracle[:3])) < 1e-6
        assert np.max(np.abs(fitted.eta_t2 - oracle[3:])) < 1e-6

    def test_pure_stratum_one_equals_plain_cox(self, small_data):
        ds, truth = small_data
        pm = PosteriorMatrix(probs=np.tile([1.0, 0.0, 0.0], (ds.n, 1)))
        w = np.column_stack([ds.a.astype(float), ds.x])
        r1 = 1.0 - ds.delta_t + ds.delta_m * ds.delta_t
        oracle = independent_cox_pair(
            ds.z, r1, ds.delta_m == 1, np.ones(ds.n, bool), w,
            np.zeros(ds.n, bool), np.column_stack([np.ones(ds.n), ds.x]))
        got = m_step_eta("m1", ds, pm, params=ParameterSet.zeros(ds.p))
        assert np.max(np.abs(got - oracle[:3])) < 1e-6

    def test_zero_design_returns_zero(self):
        ds = Dataset(ids=list("abcd"), a=[0, 0, 0, 0], z=[1, 2, 1.5, 3],
                     delta_m=[1, 1, 0, 0], y=[2, 3, 1.5, 3],
                     delta_t=[1, 1, 1, 0], x=np.zeros((4, 1)))
        pm = PosteriorMatrix(probs=np.tile([1.0, 0.0, 0.0], (4, 1)))
        got = m_step_eta("m1", ds, pm, params=ParameterSet.zeros(1))
        assert np.array_equal(got, np.zeros(2))

    def test_jacobian_matches_finite_differences(self, small_data):
        ds, _ = small_data
        rng = np.random.default_rng(17)
        pm = PosteriorMatrix(probs=rng.dirichlet([1, 1, 1], size=ds.n))
        worst = 0.0
        for _ in range(20):
            block = rng.choice(["m1", "m2", "r1", "r2", "t2", "t3"])
            params = ParameterSet.from_vector(rng.uniform(-0.8, 0.8, 24), 2)
            eta = rng.uniform(-0.8, 0.8, 3)
            score, jac = eta_score_jacobian(block, eta, ds, pm, params)
            h = 1e-6
            fd = np.zeros((3, 3))
            for k in range(3):
                up, dn = eta.copy(), eta.copy()
                up[k] += h
                dn[k] -= h
                fd[:, k] = (eta_score_jacobian(block, up, ds, pm, params)[0]
                            - eta_score_jacobian(block, dn, ds, pm, params)[0]) / (2 * h)
            scale = np.maximum(np.abs(fd), 1.0)
            worst = max(worst, float(np.max(np.abs(jac - fd) / scale)))
        assert worst < 1e-5


class TestMStepAlpha:
    def test_uniform_posteriors_intercept_only(self):
        pm = PosteriorMatrix(probs=np.full((50, 3), 1 / 3))
        a1, a2 = m_step_alpha(pm, np.empty((50, 0)))
        assert a1 == pytest.approx([0.0], abs=1e-12)
        assert a2 == pytest.approx([0.0], abs=1e-12)

    def test_fixed_point_recovery(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(400, 2))
        a_true = np.array([0.3, -0.5, 0.8, -0.2, 0.4, 0.1])
        from stratmed.model_core import stratum_weight_matrix

        probs = stratum_weight_matrix(x, a_true[:3], a_true[3:])
        a1, a2 = m_step_alpha(PosteriorMatrix(probs=probs), x)
        assert np.max(np.abs(np.concatenate([a1, a2]) - a_true)) < 1e-8

    def test_matches_generic_root_finder(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(200, 2))
        pm = PosteriorMatrix(probs=rng.dirichlet([2, 1, 1], size=200))
        a1, a2 = m_step_alpha(pm, x)
        got = np.concatenate([a1, a2])
        score, _ = alpha_score_hessian(got, x, pm)
        assert np.linalg.norm(score) < 1e-8

        sol = optimize.root(lambda v: alpha_score_hessian(v, x, pm)[0],
                            np.zeros(6), tol=1e-12)
        assert sol.success
        assert np.max(np.abs(got - sol.x)) < 1e-7

    def test_hessian_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(150, 2))
        pm = PosteriorMatrix(probs=rng.dirichlet([1, 1, 1], size=150))
        vec = rng.uniform(-0.5, 0.5, 6)
        _, hess = alpha_score_hessian(vec, x, pm)
        fd = np.zeros((6, 6))
        for k in range(6):
            up, dn = vec.copy(), vec.copy()
            up[k] += 1e-6
            dn[k] -= 1e-6
            fd[:, k] = (alpha_score_hessian(up, x, pm)[0]
                        - alpha_score_hessian(dn, x, pm)[0]) / 2e-6
        assert np.max(np.abs(hess - fd) / np.maximum(np.abs(fd), 1.0)) < 1e-5


class TestNewtonMachinery:
    def test_inconsistent_singular_system_raises(self):
        from stratmed.em import _solve_step
        from stratmed.errors import RankDeficiencyError

        jac = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(RankDeficiencyError):
            _solve_step(jac, np.array([0.5, 0.5]), "test")

    def test_consistent_singular_system_pins_flat_directions(self):
        from stratmed.em import _solve_step

        jac = np.array([[2.0, 0.0], [0.0, 0.0]])
        delta = _solve_step(jac, np.array([0.5, 0.0]), "test")
        assert delta == pytest.approx([-0.25, 0.0], abs=1e-12)

    def test_stalled_score_raises_solver_failure(self):
        from stratmed.em import _newton
        from stratmed.errors import SolverFailureError

        def stuck(x, state):
            return np.array([1.0]), np.array([[1.0]])

        with pytest.raises(SolverFailureError) as info:
            _newton(stuck, np.zeros(1), tol=1e-8, max_iters=5,
                    halving_max=3, what="stuck")
        assert info.value.residual_norm == pytest.approx(1.0)

    def test_inner_failures_carry_iteration_context(self, small_data,
                                                    monkeypatch):
        import stratmed.em as em_mod
        from stratmed.errors import DegenerateRiskSetError

        ds, _ = small_data

        def explode(*args, **kwargs):
            raise DegenerateRiskSetError("zero-weight risk set at jump time 1.0",
                                         jump_time=1.0)

        monkeypatch.setattr(em_mod, "_sweep", explode)
        with pytest.raises(DegenerateRiskSetError, match="EM iteration 1"):
            em_mod.fit(ds, EmConfig())


class TestFit:
    def test_converges_on_benchmark_data(self, small_fit):
        assert small_fit.converged
        assert small_fit.n_iters < 5000

    def test_no_intermediate_events_rejected(self):
        ds = Dataset(ids=["a", "b"], a=[0, 1], z=[1.0, 2.0], delta_m=[0, 0],
                     y=[1.0, 2.0], delta_t=[1, 1], x=[[0.1], [0.2]])
        with pytest.raises(InvalidInputError, match="no intermediate events"):
            fit(ds)

    def test_ascent_on_random_small_datasets(self):
        rng = np.random.default_rng(99)
        for rep in range(8):
            params = sm.ParameterSet.from_vector(rng.uniform(-1, 1, 24), 2)
            spec = replace(sm.benchmark_spec(200, seed=5000 + rep),
                           true_params=params)
            ds, _ = sm.generate(spec)
            result = fit(ds)
            assert result.converged
            assert np.all(np.diff(result.loglik_trace) >= -1e-10)

    def test_self_consistency_at_convergence(self, small_data, small_fit):
        ds, _ = small_data
        post = e_step(ds, small_fit.params, small_fit.hazards)
        params = small_fit.params
        for block in ("m1", "m2", "r1", "r2", "t2", "t3"):
            eta = m_step_eta(block, ds, post, params=params)
            assert np.max(np.abs(eta - getattr(params, f"eta_{block}"))) < 5e-5
        a1, a2 = m_step_alpha(post, ds.x,
                              warm_start=np.concatenate([params.alpha1,
                                                         params.alpha2]))
        assert np.max(np.abs(a1 - params.alpha1)) < 5e-5
        assert np.max(np.abs(a2 - params.alpha2)) < 5e-5

    def test_zeroed_covariates_equal_intercept_only_fit(self, small_data):
        ds, _ = small_data
        zeroed = Dataset(ds.ids, ds.a, ds.z, ds.delta_m, ds.y, ds.delta_t,
                         np.zeros_like(ds.x))
        nox = Dataset(ds.ids, ds.a, ds.z, ds.delta_m, ds.y, ds.delta_t,
                      np.empty((ds.n, 0)))
        with pytest.warns(UserWarning, match="collinear"):
            f_zero = fit(zeroed)
        f_nox = fit(nox)
        for block in ("eta_m1", "eta_r1", "eta_t3"):
            z_block = getattr(f_zero.params, block)
            assert z_block[0] == pytest.approx(getattr(f_nox.params, block)[0],
                                               abs=5e-6)
            assert np.all(z_block[1:] == 0.0)
        for k in range(3):
            assert np.max(np.abs(f_zero.hazards[k].jump_sizes
                                 - f_nox.hazards[k].jump_sizes)) < 5e-6

    def test_warm_start_round_trip_converges_immediately(self, small_data,
                                                         small_fit):
        ds, _ = small_data
        cfg = EmConfig(init_params=small_fit.params,
                       init_jumps=tuple(h.jump_sizes for h in small_fit.hazards))
        refit = fit(ds, cfg)
        assert refit.converged
        assert refit.n_iters <= 2

    def test_plain_and_accelerated_agree(self, small_data):
        ds, _ = small_data
        accel = fit(ds, EmConfig())
        plain = fit(ds, EmConfig(accelerate=False))
        assert accel.converged and plain.converged
        assert np.max(np.abs(accel.params.to_vector()
                             - plain.params.to_vector())) < 5e-4
        assert accel.final_loglik == pytest.approx(plain.final_loglik, abs=1e-5)

    def test_single_newton_step_mode_still_ascends(self, small_data):
        ds, _ = small_data
        result = fit(ds, EmConfig(single_newton_step=True, accelerate=False,
                                  max_outer_iters=400))
        assert np.all(np.diff(result.loglik_trace) >= -1e-10)

    def test_nonconvergence_returns_partial_fit(self, small_data):
        ds, _ = small_data
        result = fit(ds, EmConfig(max_outer_iters=3))
        assert not result.converged
        assert result.n_iters == 3

    def test_multi_start_finds_same_optimum(self, small_data, small_fit):
        ds, _ = small_data
        multi = fit(ds, EmConfig(n_starts=3, seed=2))
        assert multi.converged
        assert multi.final_loglik == pytest.approx(small_fit.final_loglik,
                                                   abs=1e-4)

    def test_fitted_effects_track_truth_within_table_spread(self, bench_fit_2000):
        """Single-replicate plug-in effects land within the reported
        sampling spread of the benchmark design at n=2000."""
        ds, truth, fitted = bench_fit_2000
        spec = sm.benchmark_spec(2000, seed=11)
        x = (0.5, 0.5)
        spread = {("NDE1", 2.0): 0.031, ("NDE1", 4.0): 0.052, ("NDE1", 6.0): 0.057,
                  ("NIE1", 2.0): 0.015, ("NIE1", 4.0): 0.011, ("NIE1", 6.0): 0.007,
                  ("TE2", 2.0): 0.115, ("TE2", 4.0): 0.113, ("TE2", 6.0): 0.097,
                  ("TE2", 8.0): 0.084, ("TE3", 2.0): 0.117, ("TE3", 4.0): 0.101,
                  ("TE3", 6.0): 0.086, ("TE3", 8.0): 0.075}
        for (name, t), se in spread.items():
            est = effect_value(name, t, x, fitted)
            tru = sm.true_effect(name, t, x, spec)
            assert abs(est - tru) < 2.0 * se, (name, t, est, tru)
