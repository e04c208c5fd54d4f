"""Stratum-specific mediation and total effects from a fitted model.

All effects are survival-probability contrasts at a time ``t`` for a
covariate profile ``x``:

* ``NIE1`` -- stratum-1 change from shifting the intermediate-event law from
  its control to its treated version while holding treatment at 1,
* ``NDE1`` -- stratum-1 change from switching treatment while holding the
  intermediate-event law at its control version,
* ``TE1`` = NIE1 + NDE1,
* ``TE2`` / ``TE3`` -- arm-wise survival differences in strata 2 and 3.

Plug-in estimators sum over the fitted hazard jumps; marginalized versions
average the conditional effects over subjects with stratum-1 membership
weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStratumError, InvalidInputError, OutOfSupportError
from .model_core import (
    FittedModel,
    as_dataset,
    check_illness_support,
    clipped_exp,
    cumhaz,
    stratum_weight_matrix,
)

EFFECT_NAMES = ("NIE1", "NDE1", "TE1", "TE2", "TE3", "NIE1_marginal", "NDE1_marginal")


@dataclass(frozen=True)
class EffectCurve:
    """A named effect evaluated on a time grid, with optional bootstrap
    uncertainty bands."""

    name: str
    grid: np.ndarray
    values: np.ndarray
    covariate_profile: tuple | None = None
    se: np.ndarray | None = None
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.shape != values.shape:
            raise InvalidInputError("grid and values differ in shape")
        if np.any(np.diff(grid) < 0):
            raise InvalidInputError("grid must be nondecreasing")
        if self.name in EFFECT_NAMES:
            if np.any(np.abs(values) > 1.0 + 1e-12):
                raise InvalidInputError("effect values must lie in [-1, 1]")
            at_zero = values[grid == 0.0]
            if at_zero.size and np.any(np.abs(at_zero) > 1e-12):
                raise InvalidInputError("effects must vanish at t = 0")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)


def _profile(x, fit: FittedModel) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != fit.params.p:
        raise InvalidInputError(
            f"profile has {x.size} covariates, the model expects {fit.params.p}")
    return x


def _require_converged(fit: FittedModel) -> None:
    if not fit.converged:
        raise InvalidInputError("effects require a converged fit")


def _exp_lp(block: np.ndarray, lead: float, x: np.ndarray) -> float:
    vals, _ = clipped_exp(np.array([block[0] * lead + block[1:] @ x]))
    return float(vals[0])


def _exp_intercept(block: np.ndarray, x: np.ndarray) -> float:
    vals, _ = clipped_exp(np.array([block[0] + block[1:] @ x]))
    return float(vals[0])


def nie1(t: float, x, fit: FittedModel) -> float:
    """Stratum-1 natural indirect effect at time ``t`` and profile ``x``."""
    _require_converged(fit)
    x = _profile(x, fit)
    if t < 0:
        raise InvalidInputError("effects are defined for t >= 0")
    check_illness_support(fit, t)
    h1, h2 = fit.hazards[0], fit.hazards[1]
    p = fit.params
    e_m1_trt = _exp_lp(p.eta_m1, 1.0, x)
    e_m1_ctl = _exp_lp(p.eta_m1, 0.0, x)
    e_r1_trt = _exp_lp(p.eta_r1, 1.0, x)

    k = int(np.searchsorted(h1.jump_times, t, side="right"))
    total = math.exp(-cumhaz(h1, t) * e_m1_trt) - math.exp(-cumhaz(h1, t) * e_m1_ctl)
    if k:
        jt = h1.jump_times[:k]
        lam = h1.jump_sizes[:k]
        cum = h1.cumulative[:k]
        gap_surv = np.exp(-cumhaz(h2, t - jt) * e_r1_trt)
        onset_diff = (e_m1_trt * np.exp(-cum * e_m1_trt)
                      - e_m1_ctl * np.exp(-cum * e_m1_ctl))
        total += float(np.sum(gap_surv * lam * onset_diff))
    return total


def nde1(t: float, x, fit: FittedModel) -> float:
    """Stratum-1 natural direct effect at time ``t`` and profile ``x``."""
    _require_converged(fit)
    x = _profile(x, fit)
    if t < 0:
        raise InvalidInputError("effects are defined for t >= 0")
    check_illness_support(fit, t)
    h1, h2 = fit.hazards[0], fit.hazards[1]
    p = fit.params
    e_m1_ctl = _exp_lp(p.eta_m1, 0.0, x)
    e_r1_trt = _exp_lp(p.eta_r1, 1.0, x)
    e_r1_ctl = _exp_lp(p.eta_r1, 0.0, x)

    k = int(np.searchsorted(h1.jump_times, t, side="right"))
    if not k:
        return 0.0
    jt = h1.jump_times[:k]
    lam = h1.jump_sizes[:k]
    cum = h1.cumulative[:k]
    gap_cum = cumhaz(h2, t - jt)
    gap_diff = np.exp(-gap_cum * e_r1_trt) - np.exp(-gap_cum * e_r1_ctl)
    onset_mass = lam * e_m1_ctl * np.exp(-cum * e_m1_ctl)
    return float(np.sum(gap_diff * onset_mass))


def te2(t: float, x, fit: FittedModel) -> float:
    """Stratum-2 total effect: treated direct-death survival minus the
    untreated illness-path survival."""
    _require_converged(fit)
    x = _profile(x, fit)
    if t < 0:
        raise InvalidInputError("effects are defined for t >= 0")
    h3 = fit.hazards[2]
    if t > h3.support:
        raise OutOfSupportError(
            f"t={t} beyond the direct-death hazard support {h3.support}")
    check_illness_support(fit, t)
    h1, h2 = fit.hazards[0], fit.hazards[1]
    p = fit.params
    e_t2 = _exp_intercept(p.eta_t2, x)
    e_m2 = _exp_intercept(p.eta_m2, x)
    e_r2 = _exp_intercept(p.eta_r2, x)

    total = math.exp(-cumhaz(h3, t) * e_t2) - 1.0
    k = int(np.searchsorted(h1.jump_times, t, side="right"))
    if k:
        jt = h1.jump_times[:k]
        lam = h1.jump_sizes[:k]
        cum = h1.cumulative[:k]
        gap_cum = cumhaz(h2, t - jt)
        onset_mass = lam * e_m2 * np.exp(-cum * e_m2)
        total += float(np.sum(onset_mass * (1.0 - np.exp(-gap_cum * e_r2))))
    return total


def te3(t: float, x, fit: FittedModel) -> float:
    """Stratum-3 total effect: the arm-wise direct-death survival difference."""
    _require_converged(fit)
    x = _profile(x, fit)
    if t < 0:
        raise InvalidInputError("effects are defined for t >= 0")
    h3 = fit.hazards[2]
    if t > h3.support:
        raise OutOfSupportError(
            f"t={t} beyond the direct-death hazard support {h3.support}")
    p = fit.params
    lam3 = cumhaz(h3, t)
    return math.exp(-lam3 * _exp_lp(p.eta_t3, 1.0, x)) \
        - math.exp(-lam3 * _exp_lp(p.eta_t3, 0.0, x))


_SCALAR_EFFECTS = {"NIE1": nie1, "NDE1": nde1, "TE2": te2, "TE3": te3}


def effect_value(name: str, t: float, x, fit: FittedModel) -> float:
    if name == "TE1":
        return nie1(t, x, fit) + nde1(t, x, fit)
    if name in _SCALAR_EFFECTS:
        return _SCALAR_EFFECTS[name](t, x, fit)
    raise InvalidInputError(f"unknown effect name {name!r}")


def effect_curve(name: str, fit: FittedModel, grid, x) -> EffectCurve:
    """Evaluate a conditional effect on a grid of times."""
    grid = np.asarray(grid, dtype=float)
    values = np.array([effect_value(name, float(t), x, fit) for t in grid])
    return EffectCurve(name=name, grid=grid, values=values,
                       covariate_profile=tuple(np.asarray(x, float).ravel()))


def marginal_effects(t: float, fit: FittedModel, data) -> tuple[float, float]:
    """Marginalized stratum-1 (indirect, direct) effects at time ``t``.

    Conditional effects at every subject's covariates are averaged with the
    subjects' stratum-1 membership weights.
    """
    _require_converged(fit)
    ds = as_dataset(data)
    w1 = stratum_weight_matrix(ds.x, fit.params.alpha1, fit.params.alpha2)[:, 0]
    total = float(w1.sum())
    if not (math.isfinite(total) and total > 0):
        raise DegenerateStratumError(
            "stratum-1 membership weights sum to zero; marginal effects undefined")
    nie_vals, nde_vals = _conditional_effects_vector(t, ds.x, fit)
    return (float(w1 @ nie_vals / total), float(w1 @ nde_vals / total))


def marginal_effect_curves(fit: FittedModel, data, grid) -> tuple[EffectCurve, EffectCurve]:
    grid = np.asarray(grid, dtype=float)
    nies = np.empty(grid.size)
    ndes = np.empty(grid.size)
    for g, t in enumerate(grid):
        nies[g], ndes[g] = marginal_effects(float(t), fit, data)
    return (EffectCurve(name="NIE1_marginal", grid=grid, values=nies),
            EffectCurve(name="NDE1_marginal", grid=grid, values=ndes))


def _conditional_effects_vector(t: float, x_matrix: np.ndarray, fit: FittedModel):
    """NIE1 and NDE1 at one time for every row of a covariate matrix."""
    check_illness_support(fit, t)
    h1, h2 = fit.hazards[0], fit.hazards[1]
    p = fit.params
    x_matrix = np.asarray(x_matrix, dtype=float)
    gam_m1 = x_matrix @ p.eta_m1[1:]
    gam_r1 = x_matrix @ p.eta_r1[1:]
    e_m1_trt, _ = clipped_exp(p.eta_m1[0] + gam_m1)
    e_m1_ctl, _ = clipped_exp(gam_m1)
    e_r1_trt, _ = clipped_exp(p.eta_r1[0] + gam_r1)
    e_r1_ctl, _ = clipped_exp(gam_r1)

    lam1_t = cumhaz(h1, t)
    nie = np.exp(-lam1_t * e_m1_trt) - np.exp(-lam1_t * e_m1_ctl)
    nde = np.zeros(x_matrix.shape[0])
    k = int(np.searchsorted(h1.jump_times, t, side="right"))
    if k:
        jt = h1.jump_times[:k]
        lam = h1.jump_sizes[:k]
        cum = h1.cumulative[:k]
        gap_cum = cumhaz(h2, t - jt)
        surv_trt = np.exp(-np.outer(e_m1_trt, cum))
        surv_ctl = np.exp(-np.outer(e_m1_ctl, cum))
        gap_trt = np.exp(-np.outer(e_r1_trt, gap_cum))
        gap_ctl = np.exp(-np.outer(e_r1_ctl, gap_cum))
        onset_diff = e_m1_trt[:, None] * surv_trt - e_m1_ctl[:, None] * surv_ctl
        nie = nie + (gap_trt * lam[None, :] * onset_diff).sum(axis=1)
        onset_ctl = e_m1_ctl[:, None] * surv_ctl * lam[None, :]
        nde = ((gap_trt - gap_ctl) * onset_ctl).sum(axis=1)
    return nie, nde


def default_grid(data, n_points: int = 100) -> np.ndarray:
    """Evenly spaced times from 0 to the 95th percentile of observed
    follow-up."""
    ds = as_dataset(data)
    upper = float(np.quantile(ds.y, 0.95))
    return np.linspace(0.0, upper, n_points)
