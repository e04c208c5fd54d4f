"""Bootstrap uncertainty, Wald tests, and the treatment-label-swap check.

Standard errors come from refitting whole-record resamples; each resample's
random stream is spawned from the master seed by its resample index, so
serial and parallel runs agree bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .effects import effect_value, marginal_effects
from .em import EmConfig, fit
from .errors import (
    InvalidInputError,
    NumericalError,
    OutOfSupportError,
    UnreliableInferenceError,
)
from .model_core import Dataset, FittedModel, as_dataset, stratum_weight_matrix

WALD_Z = 1.96  # 95% interval multiplier


@dataclass(frozen=True)
class EffectPoint:
    """One requested effect evaluation (conditional at a profile, or
    marginal when ``profile`` is None)."""

    name: str
    t: float
    profile: tuple | None = None


@dataclass(frozen=True)
class EffectPointSummary:
    point: EffectPoint
    estimate: float
    se: float | None
    ci_low: float | None
    ci_high: float | None
    n_used: int


@dataclass(frozen=True)
class BootstrapResult:
    """Resampling summary: per-parameter spread plus any requested effect
    points."""

    seed: int
    n_resamples: int
    n_failed_resamples: int
    param_names: tuple[str, ...]
    estimates: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    interval: str
    effect_points: tuple[EffectPointSummary, ...] = ()
    base_fit: FittedModel | None = None


def _resample_indices(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n)


def _child_rng(seed: int, index: int) -> np.random.Generator:
    key = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.Generator(np.random.PCG64(key))


def _evaluate_points(fit_result: FittedModel, data: Dataset,
                     points: tuple[EffectPoint, ...]) -> list[float]:
    out = []
    for pt in points:
        try:
            if pt.profile is None:
                nie, nde = marginal_effects(pt.t, fit_result, data)
                out.append(nie if pt.name == "NIE1_marginal" else nde)
            else:
                out.append(effect_value(pt.name, pt.t, pt.profile, fit_result))
        except OutOfSupportError:
            out.append(math.nan)
    return out


def _one_resample(args):
    (b, seed, ds, config, points, identity, warm_vec, p) = args
    from .model_core import ParameterSet

    if identity:
        indices = np.arange(ds.n)
    else:
        indices = _resample_indices(_child_rng(seed, b), ds.n)
    sample = ds.subset(indices)
    cfg = config
    if warm_vec is not None:
        cfg = replace(config, init_params=ParameterSet.from_vector(warm_vec, p))
    try:
        refit = fit(sample, cfg)
    except (NumericalError, InvalidInputError):
        return b, None, None
    if not refit.converged:
        return b, None, None
    return b, refit.params.to_vector(), _evaluate_points(refit, sample, points)


def bootstrap(data, config: EmConfig | None = None, n_resamples: int = 100,
              seed: int = 0, effect_points: tuple[EffectPoint, ...] = (),
              interval: str = "wald", warm_start: bool = True,
              identity_resample: bool = False, threads: int = 1,
              base_fit: FittedModel | None = None) -> BootstrapResult:
    """Nonparametric bootstrap of the full fit.

    Resamples subjects with replacement, refits each resample (warm-started
    at the base estimate by default), and summarizes the spread of the
    parameter estimates and any requested effect points.  Non-converged
    resamples are dropped and counted; more than 20% failures aborts.

    ``identity_resample`` disables resampling (every replicate refits the
    original data), which is useful to verify that the spread of identical
    refits is zero.
    """
    if n_resamples < 1:
        raise InvalidInputError("n_resamples must be at least 1")
    if interval not in ("wald", "percentile"):
        raise InvalidInputError("interval must be 'wald' or 'percentile'")
    ds = as_dataset(data)
    cfg = config or EmConfig()
    if base_fit is None:
        base_fit = fit(ds, cfg)
    if not base_fit.converged:
        raise InvalidInputError("bootstrap requires a converged base fit")
    base_vec = base_fit.params.to_vector()
    warm_vec = base_vec if warm_start else None
    base_points = _evaluate_points(base_fit, ds, tuple(effect_points))

    tasks = [(b, seed, ds, cfg, tuple(effect_points), identity_resample,
              warm_vec, ds.p) for b in range(n_resamples)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(_one_resample, tasks))
    else:
        raw = [_one_resample(t) for t in tasks]
    raw.sort(key=lambda r: r[0])

    param_rows = [vec for _, vec, _ in raw if vec is not None]
    effect_rows = [vals for _, vec, vals in raw if vec is not None]
    n_failed = n_resamples - len(param_rows)
    if n_failed > 0.2 * n_resamples:
        raise UnreliableInferenceError(
            f"{n_failed}/{n_resamples} bootstrap resamples failed to converge")

    mat = np.array(param_rows)
    # center on the first row so identical replicates yield exactly zero SE
    se = (mat - mat[0]).std(axis=0, ddof=1) if mat.shape[0] > 1 \
        else np.zeros(base_vec.size)
    if interval == "wald":
        ci_low = base_vec - WALD_Z * se
        ci_high = base_vec + WALD_Z * se
    else:
        ci_low = np.quantile(mat, 0.025, axis=0)
        ci_high = np.quantile(mat, 0.975, axis=0)

    summaries = []
    for j, pt in enumerate(effect_points):
        vals = np.array([row[j] for row in effect_rows])
        vals = vals[np.isfinite(vals)]
        est = base_points[j]
        if vals.size > 1:
            pt_se = float((vals - vals[0]).std(ddof=1))
            if interval == "wald":
                lo, hi = est - WALD_Z * pt_se, est + WALD_Z * pt_se
            else:
                lo, hi = float(np.quantile(vals, 0.025)), float(np.quantile(vals, 0.975))
        else:
            pt_se, lo, hi = None, None, None
        summaries.append(EffectPointSummary(
            point=pt, estimate=est, se=pt_se, ci_low=lo, ci_high=hi,
            n_used=int(vals.size)))

    return BootstrapResult(
        seed=seed, n_resamples=n_resamples, n_failed_resamples=n_failed,
        param_names=tuple(base_fit.params.names()), estimates=base_vec,
        se=se, ci_low=ci_low, ci_high=ci_high, interval=interval,
        effect_points=tuple(summaries), base_fit=base_fit,
    )


@dataclass(frozen=True)
class WaldTest:
    name: str
    estimate: float
    se: float
    z: float | None
    p_value: float | None


def wald_tests(fit_result: FittedModel, boot: BootstrapResult) -> list[WaldTest]:
    """Two-sided normal tests of each coefficient against zero.

    A zero bootstrap SE yields an undefined-test marker (``z`` and ``p``
    are None) rather than an error.
    """
    est = fit_result.params.to_vector()
    names = fit_result.params.names()
    if len(names) != boot.se.size:
        raise InvalidInputError("bootstrap result does not match the fit")
    out = []
    for name, e, s in zip(names, est, boot.se):
        if s > 0:
            z = e / s
            p = math.erfc(abs(z) / math.sqrt(2.0))
            out.append(WaldTest(name=name, estimate=float(e), se=float(s),
                                z=float(z), p_value=float(p)))
        else:
            out.append(WaldTest(name=name, estimate=float(e), se=float(s),
                                z=None, p_value=None))
    return out


@dataclass(frozen=True)
class SwapSensitivity:
    """Average fitted stratum-2 weight under original and swapped treatment
    labels.  A small swapped value supports the assumption that treatment
    never creates susceptibility."""

    avg_w2_original: float
    avg_w2_swapped: float
    original_converged: bool
    swapped_converged: bool
    original_iters: int
    swapped_iters: int


def label_swap_sensitivity(data, config: EmConfig | None = None) -> SwapSensitivity:
    """Refit with treatment labels flipped and report average stratum-2
    membership under both labelings."""
    ds = as_dataset(data)
    arms = np.unique(ds.a)
    if arms.size < 2:
        raise InvalidInputError(
            "label-swap sensitivity needs both treatment arms present")
    cfg = config or EmConfig()
    original = fit(ds, cfg)
    swapped = fit(ds.with_treatment(1 - ds.a), cfg)

    def avg_w2(fitted: FittedModel) -> float:
        w = stratum_weight_matrix(ds.x, fitted.params.alpha1, fitted.params.alpha2)
        return float(w[:, 1].mean())

    return SwapSensitivity(
        avg_w2_original=avg_w2(original),
        avg_w2_swapped=avg_w2(swapped),
        original_converged=original.converged,
        swapped_converged=swapped.converged,
        original_iters=original.n_iters,
        swapped_iters=swapped.n_iters,
    )
