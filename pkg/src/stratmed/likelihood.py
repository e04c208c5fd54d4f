"""Observed-data likelihood, Kaplan-Meier curves, and the population-average
survival diagnostic.

Each subject contributes one of three likelihood kinds depending on its
censoring pattern: an observed intermediate event (kind 1), a direct death
with no intermediate event (kind 2), or no event at all (kind 3).  Every kind
is a mixture over the strata compatible with the pattern; mixtures are
evaluated in log space because late-follow-up components span many orders of
magnitude.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalDegeneracyError
from .model_core import (
    BaselineHazard,
    Dataset,
    FittedModel,
    ParameterSet,
    as_dataset,
    clipped_exp,
    cumhaz,
    stratum_weight_matrix,
)

_NEG_INF = -np.inf


@dataclass(frozen=True)
class LikelihoodBreakdown:
    """Per-subject log contributions, their kinds (1/2/3), and the total."""

    kinds: np.ndarray
    logs: np.ndarray
    total: float


def _design(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """(treatment, covariates) and (intercept, covariates) design rows."""
    w = np.column_stack([ds.a.astype(float), ds.x])
    xt = np.column_stack([np.ones(ds.n), ds.x])
    return w, xt


def component_logs(ds: Dataset, params: ParameterSet,
                   lam1_at_z: np.ndarray, lam2_at_v: np.ndarray,
                   lam3_at_y: np.ndarray):
    """Log mixture components for every subject under every case pattern.

    ``lam*_at_*`` are the cumulative hazards evaluated at each subject's
    observed times (gap entries are ignored for subjects without an observed
    intermediate event).  Returns a dict of n-vectors plus the clamp count.
    """
    w, xt = _design(ds)
    dt = ds.delta_t.astype(float)
    a0 = ds.a == 0

    n_clamped = 0
    lp = {}
    for name, mat, block in (
        ("m1", w, params.eta_m1), ("r1", w, params.eta_r1),
        ("m2", xt, params.eta_m2), ("r2", xt, params.eta_r2),
        ("t2", xt, params.eta_t2), ("t3", w, params.eta_t3),
    ):
        vals = mat @ block
        e, c = clipped_exp(vals)
        n_clamped += c
        lp[name] = vals
        lp["e_" + name] = e
    la1 = xt @ params.alpha1
    la2 = xt @ params.alpha2

    with np.errstate(invalid="ignore", over="ignore"):
        log_b1 = (la1 + lp["m1"] + dt * lp["r1"]
                  - lp["e_m1"] * lam1_at_z - lp["e_r1"] * lam2_at_v)
        log_b2 = np.where(
            a0,
            la2 + lp["m2"] + dt * lp["r2"]
            - lp["e_m2"] * lam1_at_z - lp["e_r2"] * lam2_at_v,
            _NEG_INF,
        )
        log_c2 = np.where(~a0, la2 + dt * lp["t2"] - lp["e_t2"] * lam3_at_y,
                          _NEG_INF)
        log_c3 = dt * lp["t3"] - lp["e_t3"] * lam3_at_y
        log_d1 = la1 - lp["e_m1"] * lam1_at_z
        log_d2 = la2 + np.where(a0, -lp["e_m2"] * lam1_at_z,
                                -lp["e_t2"] * lam3_at_y)
        log_d3 = -lp["e_t3"] * lam3_at_y

    # log of the shared multinomial normalizer 1 + e^{a1'x} + e^{a2'x}
    m = np.maximum(np.maximum(la1, la2), 0.0)
    log_denom = m + np.log(np.exp(-m) + np.exp(la1 - m) + np.exp(la2 - m))

    return {
        "b1": log_b1, "b2": log_b2, "c2": log_c2, "c3": log_c3,
        "d1": log_d1, "d2": log_d2, "d3": log_d3,
        "log_denom": log_denom,
    }, n_clamped


def _hazard_values_at(ds: Dataset, hazards) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h1, h2, h3 = hazards
    lam1_at_z = cumhaz(h1, ds.z)
    v = np.where(ds.delta_m == 1, ds.y - ds.z, 0.0)
    lam2_at_v = cumhaz(h2, v)
    lam3_at_y = cumhaz(h3, ds.y)
    return lam1_at_z, lam2_at_v, lam3_at_y


def _jump_log(h: BaselineHazard, times: np.ndarray, ids, what: str) -> np.ndarray:
    """log jump sizes at the given event times; missing jumps violate the
    requirement that hazards are built on the data's event times."""
    idx = np.searchsorted(h.jump_times, times)
    bad = (idx >= h.m) | (np.take(h.jump_times, np.minimum(idx, max(h.m - 1, 0)),
                                  mode="clip") != times) if h.m else np.ones(times.size, bool)
    if np.any(bad):
        where = [ids[i] for i in np.nonzero(bad)[0][:5]]
        raise InvalidInputError(
            f"{what} hazard has no jump at observed event times of subjects {where}")
    return np.log(h.jump_sizes[idx])


def observed_loglik(data, params: ParameterSet, hazards) -> LikelihoodBreakdown:
    """Observed-data log-likelihood, broken down by subject.

    Subjects route to their case pattern; each pattern is a log-sum-exp over
    the admissible strata.  The total is a compensated (exact) sum of the
    per-subject logs, so the result is invariant to subject order.
    """
    ds = as_dataset(data)
    lam1z, lam2v, lam3y = _hazard_values_at(ds, hazards)
    comp, _ = component_logs(ds, params, lam1z, lam2v, lam3y)

    dm = ds.delta_m == 1
    dt = ds.delta_t == 1
    case1 = dm
    case2 = ~dm & dt
    case3 = ~dm & ~dt
    kinds = np.where(case1, 1, np.where(case2, 2, 3))

    logs = np.empty(ds.n)
    h1, h2, h3 = hazards
    ids = ds.ids

    stack1 = np.stack([comp["b1"], comp["b2"]])
    logs_case1 = _logsumexp_cols(stack1)
    if np.any(case1):
        jump1 = np.zeros(ds.n)
        jump1[case1] = _jump_log(h1, ds.z[case1], [ids[i] for i in np.nonzero(case1)[0]],
                                 "intermediate")
        dm_dt = case1 & dt
        if np.any(dm_dt):
            jump1[dm_dt] += _jump_log(h2, (ds.y - ds.z)[dm_dt],
                                      [ids[i] for i in np.nonzero(dm_dt)[0]], "gap")
        logs_case1 = logs_case1 + jump1

    stack2 = np.stack([comp["c2"], comp["c3"]])
    logs_case2 = _logsumexp_cols(stack2)
    if np.any(case2):
        jump3 = np.zeros(ds.n)
        jump3[case2] = _jump_log(h3, ds.y[case2], [ids[i] for i in np.nonzero(case2)[0]],
                                 "direct")
        logs_case2 = logs_case2 + jump3

    # no-event subjects: both the not-yet-ill survivors and the kind-2 terms
    stack3 = np.stack([comp["c2"], comp["c3"], comp["d1"],
                       np.where(ds.a == 0, comp["d2"], _NEG_INF)])
    logs_case3 = _logsumexp_cols(stack3)

    logs = np.where(case1, logs_case1, np.where(case2, logs_case2, logs_case3))
    logs = logs - comp["log_denom"]

    bad = ~np.isfinite(logs)
    if np.any(bad):
        bad_ids = [ids[i] for i in np.nonzero(bad)[0]]
        raise NumericalDegeneracyError(
            f"likelihood underflowed to zero for subjects {bad_ids[:5]}",
            subject_ids=bad_ids)
    total = math.fsum(logs.tolist())
    return LikelihoodBreakdown(kinds=kinds, logs=logs, total=total)


def _logsumexp_cols(stack: np.ndarray) -> np.ndarray:
    """Column-wise log-sum-exp of a (k, n) stack; -inf columns stay -inf."""
    m = stack.max(axis=0)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        out = safe_m + np.log(np.sum(np.exp(stack - safe_m), axis=0))
    return np.where(np.isfinite(m), out, _NEG_INF)


@dataclass(frozen=True)
class SurvivalCurve:
    """Right-continuous product-limit survival step function."""

    times: np.ndarray
    survival: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray

    def evaluate(self, t):
        t_arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t_arr, side="right")
        vals = np.concatenate([[1.0], self.survival])[idx]
        if np.isscalar(t) or t_arr.ndim == 0:
            return float(vals)
        return vals


def kaplan_meier(times, events) -> SurvivalCurve:
    """Product-limit survival estimate.

    Ties between deaths and censorings at the same time are resolved by
    processing deaths first (the censored subject stays in the risk set for
    that death time).
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if times.size == 0:
        raise InvalidInputError("empty input")
    if times.shape != events.shape:
        raise InvalidInputError("times and events differ in length")
    if np.any(times <= 0) or not np.all(np.isfinite(times)):
        raise InvalidInputError("times must be positive and finite")
    if not np.all((events == 0) | (events == 1)):
        raise InvalidInputError("events must be 0/1")

    event_times = np.unique(times[events == 1])
    n = times.size
    at_risk = np.array([np.count_nonzero(times >= t) for t in event_times], dtype=float)
    d = np.array([np.count_nonzero((times == t) & (events == 1)) for t in event_times],
                 dtype=float)
    surv = np.cumprod(1.0 - d / at_risk) if event_times.size else np.array([])
    return SurvivalCurve(times=event_times, survival=surv,
                         n_at_risk=at_risk, n_events=d)


def population_average_survival(fit: FittedModel, data, arm: int, grid) -> "np.ndarray":
    """Average model survival over the subjects assigned to ``arm``.

    Each subject's survival is the prior-weighted mixture over strata of the
    stratum-specific survival at that subject's covariates.  Grid points
    beyond the joint hazard support are dropped with a warning.  Returns the
    (possibly truncated) grid and the averaged values.
    """
    ds = as_dataset(data)
    if arm not in (0, 1):
        raise InvalidInputError("arm must be 0 or 1")
    if not fit.converged:
        raise InvalidInputError("population averages require a converged fit")
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise InvalidInputError("grid must be nondecreasing")

    sel = ds.a == arm
    if not np.any(sel):
        raise InvalidInputError(f"no subjects in arm {arm}")
    x = ds.x[sel]
    h1, h2, h3 = fit.hazards
    t_max = _mixture_support(fit)
    keep = grid <= t_max
    if not np.all(keep):
        warnings.warn(
            f"grid truncated at {t_max:.6g}: {int(np.count_nonzero(~keep))} "
            "points beyond the fitted hazard support", stacklevel=2)
    grid = grid[keep]

    weights = stratum_weight_matrix(x, fit.params.alpha1, fit.params.alpha2)
    n_arm = x.shape[0]
    xt = np.column_stack([np.ones(n_arm), x])
    wdes = np.column_stack([np.full(n_arm, float(arm)), x])

    e_m1, _ = clipped_exp(wdes @ fit.params.eta_m1)
    e_r1, _ = clipped_exp(wdes @ fit.params.eta_r1)
    e_m2, _ = clipped_exp(xt @ fit.params.eta_m2)
    e_r2, _ = clipped_exp(xt @ fit.params.eta_r2)
    e_t2, _ = clipped_exp(xt @ fit.params.eta_t2)
    e_t3, _ = clipped_exp(wdes @ fit.params.eta_t3)

    values = np.empty(grid.size)
    for g, t in enumerate(grid):
        s1 = _illness_survival_vector(t, e_m1, e_r1, h1, h2)
        if arm == 0:
            s2 = _illness_survival_vector(t, e_m2, e_r2, h1, h2)
        else:
            s2 = np.exp(-cumhaz(h3, t) * e_t2)
        s3 = np.exp(-cumhaz(h3, t) * e_t3)
        mix = weights[:, 0] * s1 + weights[:, 1] * s2 + weights[:, 2] * s3
        values[g] = mix.mean()
    return grid, values


def _illness_survival_vector(t: float, e_onset: np.ndarray, e_gap: np.ndarray,
                             h1: BaselineHazard, h2: BaselineHazard) -> np.ndarray:
    """Illness-path survival at one time for many subjects at once."""
    lam1_t = cumhaz(h1, t)
    out = np.exp(-lam1_t * e_onset)
    k = int(np.searchsorted(h1.jump_times, t, side="right"))
    if k:
        jt = h1.jump_times[:k]
        lam = h1.jump_sizes[:k]
        cum = h1.cumulative[:k]
        gap_cum = cumhaz(h2, t - jt)
        onset_mass = (lam[None, :] * e_onset[:, None]
                      * np.exp(-np.outer(e_onset, cum)))
        out = out + np.sum(onset_mass * np.exp(-np.outer(e_gap, gap_cum)), axis=1)
    return out


def _mixture_support(fit: FittedModel) -> float:
    """Largest time at which the full three-stratum mixture is evaluable."""
    h1, h2, h3 = fit.hazards
    t_max = min(h1.support, h3.support)
    if h1.m:
        t_max = min(t_max, h1.jump_times[0] + h2.support)
    return t_max
