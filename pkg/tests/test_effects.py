import numpy as np
import pytest
from dataclasses import replace

import stratmed as sm
from stratmed.effects import (
    EffectCurve,
    default_grid,
    effect_curve,
    effect_value,
    marginal_effect_curves,
    marginal_effects,
    nde1,
    nie1,
    te2,
    te3,
)
from stratmed.errors import InvalidInputError, OutOfSupportError
from stratmed.model_core import stratum_survival


def with_params(fit, **changes):
    return sm.FittedModel(params=replace(fit.params, **changes),
                          hazards=fit.hazards, posteriors=fit.posteriors,
                          loglik_trace=fit.loglik_trace, converged=True,
                          n_iters=fit.n_iters)


class TestScalarEffects:
    def test_all_effects_vanish_at_zero(self, small_fit):
        x = (0.5, 0.5)
        for fn in (nie1, nde1, te2, te3):
            assert fn(0.0, x, small_fit) == 0.0

    def test_nie_zero_without_treatment_effect_on_onset(self, small_fit):
        fit = with_params(small_fit,
                          eta_m1=np.array([0.0, *small_fit.params.eta_m1[1:]]))
        for t in (0.5, 2.0, 5.0):
            assert nie1(t, (0.3, -0.2), fit) == pytest.approx(0.0, abs=1e-15)

    def test_nde_zero_without_treatment_effect_on_gap(self, small_fit):
        fit = with_params(small_fit,
                          eta_r1=np.array([0.0, *small_fit.params.eta_r1[1:]]))
        for t in (0.5, 2.0, 5.0):
            assert nde1(t, (0.3, -0.2), fit) == pytest.approx(0.0, abs=1e-15)

    def test_te3_zero_without_treatment_effect(self, small_fit):
        fit = with_params(small_fit,
                          eta_t3=np.array([0.0, *small_fit.params.eta_t3[1:]]))
        for t in (0.5, 2.0, 5.0):
            assert te3(t, (0.3, -0.2), fit) == pytest.approx(0.0, abs=1e-15)

    def test_matches_quadrature_at_truth(self, smooth_truth_fit):
        """Jump-sum effects on finely discretized hazards agree with the
        continuous quadrature values."""
        spec = sm.benchmark_spec(10, seed=0)
        x = (0.5, 0.5)
        for name, fn in (("NIE1", nie1), ("NDE1", nde1), ("TE2", te2),
                         ("TE3", te3)):
            for t in (2.0, 4.0, 6.0):
                got = fn(t, x, smooth_truth_fit)
                expected = sm.true_effect(name, t, x, spec)
                assert got == pytest.approx(expected, abs=3e-3), (name, t)

    def test_te2_fitted_at_large_n_matches_quadrature(self):
        """Jump-sum TE2 from a fitted model approaches the continuous-model
        value as the sample grows."""
        spec = sm.benchmark_spec(10_000, seed=505)
        ds, _ = sm.generate(spec)
        fitted = sm.fit(ds)
        x = (0.5, 0.5)
        for t in (2.0, 4.0, 6.0):
            assert te2(t, x, fitted) == pytest.approx(
                sm.true_effect("TE2", t, x, spec), abs=0.02)

    def test_decomposition_identity(self, small_fit):
        rng = np.random.default_rng(12)
        grid = np.linspace(0.0, 5.0, 50)
        for _ in range(20):
            x = rng.normal(size=2)
            for t in grid:
                lhs = nie1(t, x, small_fit) + nde1(t, x, small_fit)
                rhs = (stratum_survival(t, x, 1, 1, small_fit)
                       - stratum_survival(t, x, 0, 1, small_fit))
                assert abs(lhs - rhs) <= 1e-10

    def test_values_bounded(self, small_fit):
        rng = np.random.default_rng(3)
        for _ in range(30):
            x = rng.normal(size=2) * 2
            t = rng.uniform(0, 5)
            for fn in (nie1, nde1, te2, te3):
                assert abs(fn(t, x, small_fit)) <= 1.0

    def test_profile_continuity(self, small_fit):
        x = np.array([0.4, 0.6])
        for fn in (nie1, nde1, te2, te3):
            base = fn(3.0, x, small_fit)
            bumped = fn(3.0, x + 1e-6, small_fit)
            assert abs(bumped - base) < 1e-4

    def test_out_of_support(self, small_fit):
        for fn in (nie1, nde1, te2, te3):
            with pytest.raises(OutOfSupportError):
                fn(1e5, (0.5, 0.5), small_fit)

    def test_te1_is_sum(self, small_fit):
        x = (0.1, 0.9)
        assert effect_value("TE1", 3.0, x, small_fit) == pytest.approx(
            nie1(3.0, x, small_fit) + nde1(3.0, x, small_fit), abs=1e-15)

    def test_profile_dimension_checked(self, small_fit):
        with pytest.raises(InvalidInputError):
            nie1(1.0, (0.5,), small_fit)


class TestMarginalEffects:
    def test_single_subject_equals_conditional(self, small_data, small_fit):
        ds, _ = small_data
        solo = ds.subset([4])
        nie_m, nde_m = marginal_effects(2.0, small_fit, solo)
        assert nie_m == pytest.approx(nie1(2.0, solo.x[0], small_fit), abs=1e-12)
        assert nde_m == pytest.approx(nde1(2.0, solo.x[0], small_fit), abs=1e-12)

    def test_identical_profiles_equal_conditional(self, small_data, small_fit):
        ds, _ = small_data
        x_fixed = np.tile([0.3, 0.7], (ds.n, 1))
        same = sm.Dataset(ds.ids, ds.a, ds.z, ds.delta_m, ds.y, ds.delta_t,
                          x_fixed)
        nie_m, nde_m = marginal_effects(2.0, small_fit, same)
        assert nie_m == pytest.approx(nie1(2.0, (0.3, 0.7), small_fit), abs=1e-12)
        assert nde_m == pytest.approx(nde1(2.0, (0.3, 0.7), small_fit), abs=1e-12)

    def test_matches_independent_weighted_average(self, small_data, small_fit):
        """Re-implementation oracle: explicit per-subject loop with the
        membership-weight definition."""
        ds, _ = small_data
        from stratmed.model_core import stratum_weights

        t = 2.5
        num_nie = num_nde = den = 0.0
        for i in range(ds.n):
            w1, _, _ = stratum_weights(ds.x[i], small_fit.params.alpha1,
                                       small_fit.params.alpha2)
            num_nie += w1 * nie1(t, ds.x[i], small_fit)
            num_nde += w1 * nde1(t, ds.x[i], small_fit)
            den += w1
        nie_m, nde_m = marginal_effects(t, small_fit, ds)
        assert nie_m == pytest.approx(num_nie / den, abs=1e-12)
        assert nde_m == pytest.approx(num_nde / den, abs=1e-12)

    def test_curves_vanish_at_zero(self, small_data, small_fit):
        ds, _ = small_data
        nie_c, nde_c = marginal_effect_curves(small_fit, ds, [0.0, 1.0, 2.0])
        assert nie_c.values[0] == 0.0
        assert nde_c.values[0] == 0.0
        assert nie_c.name == "NIE1_marginal"

    def test_vanished_stratum_one_weight_raises(self, small_data, small_fit):
        from stratmed.errors import DegenerateStratumError

        ds, _ = small_data
        starved = with_params(small_fit,
                              alpha1=np.array([-800.0, 0.0, 0.0]),
                              alpha2=np.array([0.0, 0.0, 0.0]))
        with pytest.raises(DegenerateStratumError):
            marginal_effects(1.0, starved, ds)


class TestEffectCurve:
    def test_rejects_nonzero_origin(self):
        with pytest.raises(InvalidInputError):
            EffectCurve(name="NIE1", grid=[0.0, 1.0], values=[0.1, 0.2])

    def test_rejects_out_of_range_values(self):
        with pytest.raises(InvalidInputError):
            EffectCurve(name="TE2", grid=[0.0, 1.0], values=[0.0, 1.5])

    def test_survival_curves_free_of_effect_constraints(self):
        EffectCurve(name="model_avg_survival", grid=[0.0, 1.0],
                    values=[1.0, 0.8])

    def test_effect_curve_builder(self, small_fit):
        grid = np.linspace(0.0, 4.0, 9)
        curve = effect_curve("NDE1", small_fit, grid, (0.5, 0.5))
        assert curve.values[0] == 0.0
        assert curve.covariate_profile == (0.5, 0.5)
        assert curve.values[3] == pytest.approx(
            nde1(grid[3], (0.5, 0.5), small_fit), abs=1e-15)

    def test_default_grid_covers_followup(self, small_data):
        ds, _ = small_data
        grid = default_grid(ds)
        assert grid[0] == 0.0
        assert grid.size == 100
        assert grid[-1] == pytest.approx(np.quantile(ds.y, 0.95))
