"""Synthetic data generation and quadrature ground truth.

Subjects are drawn per stratum by inverse-CDF sampling under the
proportional-hazards model with smooth analytic baseline hazards.  Random
draws come from counter-based streams keyed by (seed, variable role), with a
subject's draw at its index within the role stream, so adding roles or
columns never shifts the other draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .effects import EffectCurve
from .errors import InvalidInputError, NumericalError
from .model_core import Dataset, ParameterSet, stratum_weight_matrix

HAZARD_FORMS = ("linear", "log")


@dataclass(frozen=True)
class AnalyticHazard:
    """A smooth cumulative-hazard form: ``linear`` is c*t, ``log`` is
    c*log(1+t)."""

    form: str
    scale: float = 1.0

    def __post_init__(self):
        if self.form not in HAZARD_FORMS:
            raise InvalidInputError(
                f"unsupported hazard form {self.form!r}; expected one of {HAZARD_FORMS}")
        if not self.scale > 0:
            raise InvalidInputError("hazard scale must be positive")

    def cum(self, t):
        t = np.asarray(t, dtype=float)
        if self.form == "linear":
            out = self.scale * t
        else:
            out = self.scale * np.log1p(t)
        return float(out) if out.ndim == 0 else out

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        if self.form == "linear":
            out = np.full_like(t, self.scale)
        else:
            out = self.scale / (1.0 + t)
        return float(out) if out.ndim == 0 else out

    def inverse(self, s):
        """Time at which the cumulative hazard reaches ``s``."""
        s = np.asarray(s, dtype=float)
        if self.form == "linear":
            out = s / self.scale
        else:
            out = np.expm1(s / self.scale)
        return float(out) if out.ndim == 0 else out


_ROLE_IDS = {
    "covariate": 1,
    "treatment": 2,
    "stratum": 3,
    "onset": 4,
    "gap": 5,
    "direct": 6,
    "censoring": 7,
}


def _role_rng(seed: int, role: str, sub: int = 0) -> np.random.Generator:
    key = np.random.SeedSequence(entropy=seed, spawn_key=(_ROLE_IDS[role], sub))
    return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class GenerativeSpec:
    """Complete description of a synthetic-data law."""

    n: int
    true_params: ParameterSet
    hazard_onset: AnalyticHazard
    hazard_gap: AnalyticHazard
    hazard_direct: AnalyticHazard
    censoring_max: float | None = 15.0
    covariates: tuple[str, ...] = ("normal", "uniform")
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise InvalidInputError("n must be at least 1")
        if self.censoring_max is not None and not self.censoring_max > 0:
            raise InvalidInputError("censoring_max must be positive (or None)")
        if len(self.covariates) != self.true_params.p:
            raise InvalidInputError(
                f"{len(self.covariates)} covariate specs for a model with "
                f"p={self.true_params.p}")
        for spec in self.covariates:
            kind = spec.split(":", 1)[0]
            if kind not in ("normal", "uniform", "constant"):
                raise InvalidInputError(f"unknown covariate spec {spec!r}")


@dataclass(frozen=True)
class HiddenTruth:
    """Oracle-only columns generated alongside the analysis data.

    ``m_time`` is NaN exactly where ``m_is_inf`` flags a subject whose
    intermediate event never occurs.
    """

    u: np.ndarray
    m_is_inf: np.ndarray
    m_time: np.ndarray
    t_time: np.ndarray


def benchmark_truth() -> ParameterSet:
    """Coefficients of the canonical simulation design used throughout the
    test suite and the reproduce command."""
    return ParameterSet(
        eta_m1=[0.5, 0.5, 0.5],
        eta_r1=[0.5, -0.2, -0.2],
        eta_m2=[-0.2, 0.4, 0.5],
        eta_r2=[0.4, 0.5, 0.5],
        eta_t2=[0.0, -0.5, -0.2],
        eta_t3=[0.2, -0.2, 0.0],
        alpha1=[0.0, 0.3, 0.1],
        alpha2=[0.2, -0.5, 0.3],
    )


def benchmark_spec(n: int, seed: int = 0,
                   censoring_max: float | None = 15.0) -> GenerativeSpec:
    """The canonical design: two covariates (standard normal, uniform),
    1:1 randomization, linear onset and gap hazards, a log direct-death
    hazard, and uniform censoring on (0, 15)."""
    return GenerativeSpec(
        n=n,
        true_params=benchmark_truth(),
        hazard_onset=AnalyticHazard("linear", 1.0),
        hazard_gap=AnalyticHazard("linear", 0.2),
        hazard_direct=AnalyticHazard("log", 1.0),
        censoring_max=censoring_max,
        seed=seed,
    )


def sample_event_time(hazard: AnalyticHazard, linear_predictor: float, u: float):
    """Inverse-CDF draw under S(t) = exp(-Lambda(t) * e^lp) for uniform ``u``."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr <= 0) or np.any(u_arr >= 1):
        raise InvalidInputError("u must lie strictly inside (0, 1)")
    s = -np.log(u_arr) * np.exp(-np.asarray(linear_predictor, dtype=float))
    return hazard.inverse(s)


def _uniform_open(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draws bounded away from {0, 1} so log transforms stay finite."""
    return np.clip(1.0 - rng.random(n), 1e-18, 1.0 - 1e-18)


def _draw_covariates(spec: GenerativeSpec) -> np.ndarray:
    cols = []
    for j, col_spec in enumerate(spec.covariates):
        rng = _role_rng(spec.seed, "covariate", j)
        kind, _, arg = col_spec.partition(":")
        if kind == "normal":
            cols.append(rng.normal(0.0, 1.0, spec.n))
        elif kind == "uniform":
            cols.append(rng.random(spec.n))
        else:
            cols.append(np.full(spec.n, float(arg)))
    if cols:
        return np.column_stack(cols)
    return np.empty((spec.n, 0))


def generate(spec: GenerativeSpec) -> tuple[Dataset, HiddenTruth]:
    """Draw a dataset from the spec, returning the observable records and the
    hidden per-subject truth for oracle checks.

    Stratum-1 subjects (and untreated stratum-2 subjects) take the illness
    path: onset time plus an independent gap time.  Treated stratum-2 and all
    stratum-3 subjects take the direct-death path with no intermediate event.
    """
    n = spec.n
    p_set = spec.true_params
    x = _draw_covariates(spec)
    a = (_role_rng(spec.seed, "treatment").random(n) < 0.5).astype(int)
    xt = np.column_stack([np.ones(n), x])
    w_des = np.column_stack([a.astype(float), x])

    weights = stratum_weight_matrix(x, p_set.alpha1, p_set.alpha2)
    u_draw = _role_rng(spec.seed, "stratum").random(n)
    u = np.where(u_draw < weights[:, 0], 1,
                 np.where(u_draw < weights[:, 0] + weights[:, 1], 2, 3))

    illness = (u == 1) | ((u == 2) & (a == 0))
    direct = ~illness

    lp_onset = np.where(u == 1, w_des @ p_set.eta_m1, xt @ p_set.eta_m2)
    lp_gap = np.where(u == 1, w_des @ p_set.eta_r1, xt @ p_set.eta_r2)
    lp_direct = np.where(u == 3, w_des @ p_set.eta_t3, xt @ p_set.eta_t2)

    u_onset = _uniform_open(_role_rng(spec.seed, "onset"), n)
    u_gap = _uniform_open(_role_rng(spec.seed, "gap"), n)
    u_direct = _uniform_open(_role_rng(spec.seed, "direct"), n)

    m_time = np.full(n, np.nan)
    t_time = np.empty(n)
    m_time[illness] = sample_event_time(spec.hazard_onset, lp_onset[illness],
                                        u_onset[illness])
    gap = sample_event_time(spec.hazard_gap, lp_gap[illness], u_gap[illness])
    t_time[illness] = m_time[illness] + gap
    t_time[direct] = sample_event_time(spec.hazard_direct, lp_direct[direct],
                                       u_direct[direct])

    if spec.censoring_max is None:
        c = np.full(n, np.inf)
    else:
        c = _role_rng(spec.seed, "censoring").random(n) * spec.censoring_max

    y = np.minimum(t_time, c)
    delta_t = (t_time <= c).astype(int)
    m_for_obs = np.where(illness, m_time, np.inf)
    z = np.minimum(m_for_obs, y)
    delta_m = (m_for_obs <= y).astype(int)

    ids = [f"s{i + 1:06d}" for i in range(n)]
    ds = Dataset(ids=ids, a=a, z=z, delta_m=delta_m, y=y, delta_t=delta_t, x=x)
    truth = HiddenTruth(u=u.copy(), m_is_inf=direct.copy(),
                        m_time=m_time, t_time=t_time)
    return ds, truth


# ---------------------------------------------------------------------------
# Ground-truth effects by adaptive quadrature on the smooth model.


def _quad(fn, lo: float, hi: float) -> float:
    val, err = integrate.quad(fn, lo, hi, epsabs=1e-8, epsrel=1e-10, limit=200)
    if not math.isfinite(val) or err > 1e-6:
        raise NumericalError(f"quadrature did not converge (error estimate {err:.2e})")
    return val


def true_effect(name: str, t: float, x, spec: GenerativeSpec) -> float:
    """Exact effect value under the generating law, by quadrature."""
    p = spec.true_params
    x = np.asarray(x, dtype=float).ravel()
    h1, h2, h3 = spec.hazard_onset, spec.hazard_gap, spec.hazard_direct
    if t == 0:
        return 0.0

    if name == "NIE1":
        e_trt = math.exp(p.eta_m1[0] + p.eta_m1[1:] @ x)
        e_ctl = math.exp(p.eta_m1[1:] @ x)
        e_gap = math.exp(p.eta_r1[0] + p.eta_r1[1:] @ x)

        def integrand(m):
            gap_surv = math.exp(-h2.cum(t - m) * e_gap)
            dens_diff = h1.rate(m) * (e_trt * math.exp(-h1.cum(m) * e_trt)
                                      - e_ctl * math.exp(-h1.cum(m) * e_ctl))
            return gap_surv * dens_diff

        tail = math.exp(-h1.cum(t) * e_trt) - math.exp(-h1.cum(t) * e_ctl)
        return _quad(integrand, 0.0, t) + tail

    if name == "NDE1":
        e_ctl = math.exp(p.eta_m1[1:] @ x)
        e_gap_trt = math.exp(p.eta_r1[0] + p.eta_r1[1:] @ x)
        e_gap_ctl = math.exp(p.eta_r1[1:] @ x)

        def integrand(m):
            gap_diff = (math.exp(-h2.cum(t - m) * e_gap_trt)
                        - math.exp(-h2.cum(t - m) * e_gap_ctl))
            dens = h1.rate(m) * e_ctl * math.exp(-h1.cum(m) * e_ctl)
            return gap_diff * dens

        return _quad(integrand, 0.0, t)

    if name == "TE1":
        return true_effect("NIE1", t, x, spec) + true_effect("NDE1", t, x, spec)

    if name == "TE2":
        e_t2 = math.exp(p.eta_t2[0] + p.eta_t2[1:] @ x)
        e_m2 = math.exp(p.eta_m2[0] + p.eta_m2[1:] @ x)
        e_r2 = math.exp(p.eta_r2[0] + p.eta_r2[1:] @ x)

        def integrand(m):
            dens = h1.rate(m) * e_m2 * math.exp(-h1.cum(m) * e_m2)
            return dens * (1.0 - math.exp(-h2.cum(t - m) * e_r2))

        return math.exp(-h3.cum(t) * e_t2) - 1.0 + _quad(integrand, 0.0, t)

    if name == "TE3":
        e_trt = math.exp(p.eta_t3[0] + p.eta_t3[1:] @ x)
        e_ctl = math.exp(p.eta_t3[1:] @ x)
        lam3 = h3.cum(t)
        return math.exp(-lam3 * e_trt) - math.exp(-lam3 * e_ctl)

    raise InvalidInputError(f"unknown effect name {name!r}")


def true_effects(spec: GenerativeSpec, grid, x) -> dict[str, EffectCurve]:
    """Quadrature ground truth for all four stratum effects on a grid."""
    grid = np.asarray(grid, dtype=float)
    out = {}
    for name in ("NIE1", "NDE1", "TE2", "TE3"):
        values = np.array([true_effect(name, float(t), x, spec) for t in grid])
        out[name] = EffectCurve(name=name, grid=grid, values=values,
                                covariate_profile=tuple(np.asarray(x, float).ravel()))
    return out
