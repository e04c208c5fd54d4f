import numpy as np
import pytest

import stratmed as sm


@pytest.fixture(scope="session")
def small_data():
    """A modest benchmark draw shared by tests that only need a dataset."""
    ds, truth = sm.generate(sm.benchmark_spec(300, seed=9))
    return ds, truth


@pytest.fixture(scope="session")
def small_fit(small_data):
    ds, _ = small_data
    fit = sm.fit(ds, sm.EmConfig())
    assert fit.converged
    return fit


@pytest.fixture(scope="session")
def bench_fit_2000():
    """One converged benchmark fit at n=2000, shared by the heavier checks."""
    ds, truth = sm.generate(sm.benchmark_spec(2000, seed=11))
    fit = sm.fit(ds, sm.EmConfig())
    assert fit.converged
    return ds, truth, fit


def smooth_step_hazards(t_max: float = 12.0, n_points: int = 3000):
    """Step-function discretizations of the benchmark's smooth hazards, for
    comparing step-based evaluators against quadrature oracles."""
    grid = np.linspace(t_max / n_points, t_max, n_points)
    out = []
    for label, form in (("intermediate", sm.AnalyticHazard("linear", 1.0)),
                        ("gap", sm.AnalyticHazard("linear", 0.2)),
                        ("direct", sm.AnalyticHazard("log", 1.0))):
        cum = form.cum(grid)
        jumps = np.diff(np.concatenate([[0.0], cum]))
        out.append(sm.BaselineHazard(jump_times=grid, jump_sizes=jumps, label=label))
    return tuple(out)


@pytest.fixture(scope="session")
def smooth_truth_fit():
    """A synthetic FittedModel carrying the benchmark truth on finely
    discretized hazards; lets effect/survival evaluators be checked against
    the continuous-model quadrature oracle."""
    hazards = smooth_step_hazards()
    post = sm.PosteriorMatrix(probs=np.array([[1.0, 0.0, 0.0]]))
    return sm.FittedModel(
        params=sm.benchmark_truth(), hazards=hazards, posteriors=post,
        loglik_trace=np.array([0.0]), converged=True, n_iters=1)
