"""Domain types and elementary model evaluations.

The model classifies subjects into three latent strata by whether the
intermediate event would occur under either treatment arm:

* stratum 1 -- susceptible under both arms (illness then death, two
  proportional-hazards processes on the onset and gap time scales),
* stratum 2 -- susceptible under control only (illness path when untreated,
  direct-death path when treated),
* stratum 3 -- never susceptible (direct-death path under both arms).

Membership follows a multinomial logistic model on baseline covariates;
baseline cumulative hazards are nondecreasing step functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, OutOfSupportError

# Linear predictors are clamped to this bound before exponentiation so that
# transient extreme values during estimation cannot overflow.
LINEAR_PREDICTOR_BOUND = 700.0

HAZARD_LABELS = ("intermediate", "gap", "direct")


def clipped_exp(lp: np.ndarray) -> tuple[np.ndarray, int]:
    """exp of a linear predictor clamped to +/-LINEAR_PREDICTOR_BOUND.

    Returns the exponentiated values and the number of clamped entries so
    callers can surface a warning when clamping occurred.
    """
    lp = np.asarray(lp, dtype=float)
    n_clipped = int(np.count_nonzero(np.abs(lp) > LINEAR_PREDICTOR_BOUND))
    if n_clipped:
        lp = np.clip(lp, -LINEAR_PREDICTOR_BOUND, LINEAR_PREDICTOR_BOUND)
    return np.exp(lp), n_clipped


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SubjectRecord:
    """One observation: treatment, the two (possibly censored) event times,
    their event indicators, and baseline covariates.

    ``z`` is the observed intermediate-event time (minimum of the illness
    time and ``y``) and ``delta_m`` its event indicator; ``y`` is the
    observed terminal time (minimum of death and censoring) with indicator
    ``delta_t``.
    """

    id: str
    a: int
    z: float
    delta_m: int
    y: float
    delta_t: int
    x: tuple[float, ...]

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise InvalidInputError(
                f"subject {self.id}: " + "; ".join(problems)
            )

    def problems(self) -> list[str]:
        """Return human-readable invariant violations (empty when valid)."""
        out = []
        if self.a not in (0, 1):
            out.append(f"treatment must be 0/1, got {self.a}")
        if self.delta_m not in (0, 1):
            out.append(f"delta_m must be 0/1, got {self.delta_m}")
        if self.delta_t not in (0, 1):
            out.append(f"delta_t must be 0/1, got {self.delta_t}")
        for name, v in (("z", self.z), ("y", self.y)):
            if not math.isfinite(v) or v < 0:
                out.append(f"{name} must be finite and non-negative, got {v}")
        if any(not math.isfinite(v) for v in self.x):
            out.append("covariates contain non-finite entries")
        if math.isfinite(self.z) and math.isfinite(self.y):
            if self.z > self.y:
                out.append(f"z={self.z} exceeds y={self.y}")
            if self.delta_m == 0 and self.z != self.y:
                out.append("censored intermediate time must satisfy z == y")
            if self.delta_m == 1 and not self.y - self.z > 0:
                out.append("observed intermediate event needs a positive gap y - z")
        return out

    @property
    def v(self) -> float:
        """Gap time between the intermediate event and the terminal time."""
        return self.y - self.z


class Dataset:
    """Column-oriented view of a collection of subject records.

    Arrays are read-only after construction; the class is safe to share
    across threads.
    """

    def __init__(self, ids: Sequence[str], a, z, delta_m, y, delta_t, x):
        self.ids = tuple(str(i) for i in ids)
        self.a = np.asarray(a, dtype=int).copy()
        self.z = np.asarray(z, dtype=float).copy()
        self.delta_m = np.asarray(delta_m, dtype=int).copy()
        self.y = np.asarray(y, dtype=float).copy()
        self.delta_t = np.asarray(delta_t, dtype=int).copy()
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(self.ids), -1)
        self.x = x.copy()
        n = len(self.ids)
        for name, arr in (("a", self.a), ("z", self.z), ("delta_m", self.delta_m),
                          ("y", self.y), ("delta_t", self.delta_t)):
            if arr.shape != (n,):
                raise InvalidInputError(f"column {name} has length {arr.shape}, expected {n}")
        if self.x.shape[0] != n:
            raise InvalidInputError(f"covariate matrix has {self.x.shape[0]} rows, expected {n}")
        for arr in (self.a, self.z, self.delta_m, self.y, self.delta_t, self.x):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord]) -> "Dataset":
        records = list(records)
        if not records:
            raise InvalidInputError("empty dataset")
        p = len(records[0].x)
        if any(len(r.x) != p for r in records):
            raise InvalidInputError("covariate vectors have inconsistent lengths")
        return cls(
            ids=[r.id for r in records],
            a=[r.a for r in records],
            z=[r.z for r in records],
            delta_m=[r.delta_m for r in records],
            y=[r.y for r in records],
            delta_t=[r.delta_t for r in records],
            x=np.array([r.x for r in records], dtype=float).reshape(len(records), p),
        )

    def to_records(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(
                id=self.ids[i], a=int(self.a[i]), z=float(self.z[i]),
                delta_m=int(self.delta_m[i]), y=float(self.y[i]),
                delta_t=int(self.delta_t[i]), x=tuple(self.x[i]),
            )
            for i in range(self.n)
        ]

    def validate(self) -> None:
        """Raise with all row-level invariant violations, 1-based rows."""
        problems = []
        for i, rec in enumerate(self.to_records(), start=1):
            for msg in rec.problems():
                problems.append(f"row {i}: {msg}")
        if problems:
            raise InvalidInputError("; ".join(problems))

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(
            ids=[self.ids[i] for i in indices],
            a=self.a[indices], z=self.z[indices], delta_m=self.delta_m[indices],
            y=self.y[indices], delta_t=self.delta_t[indices], x=self.x[indices],
        )

    def with_treatment(self, a) -> "Dataset":
        return Dataset(self.ids, a, self.z, self.delta_m, self.y, self.delta_t, self.x)


def as_dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        return data
    return Dataset.from_records(data)


# Order in which the coefficient blocks are flattened into a single vector.
PARAMETER_BLOCKS = ("eta_m1", "eta_r1", "eta_m2", "eta_r2", "eta_t2", "eta_t3",
                    "alpha1", "alpha2")


@dataclass(frozen=True)
class ParameterSet:
    """All regression coefficients of the model.

    Each ``eta_*`` block is (leading coefficient, covariate coefficients):
    the leading entry is the treatment log hazard ratio for the stratum-1
    and stratum-3 processes and an intercept for the stratum-2 processes.
    ``alpha1``/``alpha2`` are intercept-first multinomial logistic
    coefficients for membership in strata 1 and 2 (stratum 3 is reference).
    """

    eta_m1: np.ndarray
    eta_r1: np.ndarray
    eta_m2: np.ndarray
    eta_r2: np.ndarray
    eta_t2: np.ndarray
    eta_t3: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray

    def __post_init__(self):
        q = None
        for name in PARAMETER_BLOCKS:
            arr = np.asarray(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite entries")
            if q is None:
                q = arr.size
            elif arr.size != q:
                raise InvalidInputError(
                    f"{name} has length {arr.size}, expected {q}")
            object.__setattr__(self, name, _freeze(arr))
        if q < 1:
            raise InvalidInputError("coefficient blocks must be non-empty")

    @property
    def p(self) -> int:
        """Number of covariates (block length minus the leading entry)."""
        return self.eta_m1.size - 1

    @classmethod
    def zeros(cls, p: int) -> "ParameterSet":
        return cls(*(np.zeros(p + 1) for _ in PARAMETER_BLOCKS))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, b) for b in PARAMETER_BLOCKS])

    @classmethod
    def from_vector(cls, vec, p: int) -> "ParameterSet":
        vec = np.asarray(vec, dtype=float)
        q = p + 1
        if vec.size != 8 * q:
            raise InvalidInputError(f"expected a vector of length {8 * q}, got {vec.size}")
        return cls(*(vec[k * q:(k + 1) * q] for k in range(8)))

    def names(self) -> list[str]:
        """Flat parameter names aligned with :meth:`to_vector`."""
        out = []
        for block in PARAMETER_BLOCKS[:6]:
            tag = block.split("_")[1]
            out.append(f"beta_{tag}")
            out.extend(f"gamma_{tag}_{j}" for j in range(1, self.p + 1))
        for block in PARAMETER_BLOCKS[6:]:
            out.extend(f"{block}_{j}" for j in range(self.p + 1))
        return out


@dataclass(frozen=True)
class BaselineHazard:
    """Nondecreasing right-continuous step function: the cumulative value at
    ``t`` is the sum of jump sizes at jump times <= ``t``."""

    jump_times: np.ndarray
    jump_sizes: np.ndarray
    label: str = "intermediate"

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float).ravel()
        js = np.asarray(self.jump_sizes, dtype=float).ravel()
        if self.label not in HAZARD_LABELS:
            raise InvalidInputError(
                f"unknown hazard label {self.label!r}; expected one of {HAZARD_LABELS}")
        if jt.size != js.size:
            raise InvalidInputError("jump_times and jump_sizes differ in length")
        if jt.size:
            if not np.all(np.isfinite(jt)) or not np.all(jt > 0):
                raise InvalidInputError("jump times must be finite and positive")
            if not np.all(np.diff(jt) > 0):
                raise InvalidInputError("jump times must be strictly increasing")
            if not np.all(np.isfinite(js)) or not np.all(js > 0):
                raise InvalidInputError("jump sizes must be finite and positive")
        object.__setattr__(self, "jump_times", _freeze(jt))
        object.__setattr__(self, "jump_sizes", _freeze(js))
        object.__setattr__(self, "_cumulative", _freeze(np.concatenate([[0.0], np.cumsum(js)])))

    @property
    def cumulative(self) -> np.ndarray:
        """Cumulative value right after each jump (length = number of jumps)."""
        return self._cumulative[1:]

    @property
    def support(self) -> float:
        """Largest jump time; 0 when the hazard has no jumps."""
        return float(self.jump_times[-1]) if self.jump_times.size else 0.0

    @property
    def m(self) -> int:
        return self.jump_times.size

    def jump_at(self, t: float) -> float:
        """Jump size exactly at ``t`` (0 when ``t`` is not a jump time)."""
        i = int(np.searchsorted(self.jump_times, t))
        if i < self.m and self.jump_times[i] == t:
            return float(self.jump_sizes[i])
        return 0.0


def cumhaz(h: BaselineHazard, t):
    """Cumulative hazard at ``t`` (right-continuous: a jump at ``t`` counts).

    Accepts a scalar or an array of evaluation times.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise InvalidInputError("cumulative hazard requested at a negative time")
    idx = np.searchsorted(h.jump_times, t_arr, side="right")
    vals = h._cumulative[idx]
    if np.isscalar(t) or t_arr.ndim == 0:
        return float(vals)
    return vals


def stratum_weights(x, alpha1, alpha2) -> tuple[float, float, float]:
    """Membership probabilities (w1, w2, w3) for covariates ``x``.

    Multinomial logistic with stratum 3 as the reference category; the
    coefficient vectors are intercept-first and one entry longer than ``x``.
    Computed with a max-shift so extreme linear predictors do not overflow.
    """
    x = np.asarray(x, dtype=float).ravel()
    alpha1 = np.asarray(alpha1, dtype=float).ravel()
    alpha2 = np.asarray(alpha2, dtype=float).ravel()
    if alpha1.size != x.size + 1 or alpha2.size != x.size + 1:
        raise InvalidInputError(
            f"coefficient length {alpha1.size}/{alpha2.size} does not match "
            f"covariate length {x.size} + intercept")
    xt = np.concatenate([[1.0], x])
    lps = np.array([alpha1 @ xt, alpha2 @ xt, 0.0])
    lps -= lps.max()
    e = np.exp(lps)
    w = e / e.sum()
    return float(w[0]), float(w[1]), float(w[2])


def stratum_weight_matrix(x_matrix, alpha1, alpha2) -> np.ndarray:
    """Row-wise :func:`stratum_weights` for an (n, p) covariate matrix."""
    x_matrix = np.asarray(x_matrix, dtype=float)
    if x_matrix.ndim != 2:
        raise InvalidInputError("expected a 2-d covariate matrix")
    n = x_matrix.shape[0]
    xt = np.column_stack([np.ones(n), x_matrix])
    lps = np.column_stack([xt @ np.asarray(alpha1, float),
                           xt @ np.asarray(alpha2, float),
                           np.zeros(n)])
    lps -= lps.max(axis=1, keepdims=True)
    e = np.exp(lps)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class PosteriorMatrix:
    """Per-subject posterior membership probabilities, one row per subject."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2 or probs.shape[1] != 3:
            raise InvalidInputError("posterior matrix must have three columns")
        object.__setattr__(self, "probs", _freeze(probs))

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    def check_structure(self, data: Dataset, tol: float = 1e-12) -> None:
        """Verify row sums and the case-pattern structural zeros."""
        p = self.probs
        if p.shape[0] != data.n:
            raise InvalidInputError("posterior rows do not match the dataset")
        if np.any(p < 0) or np.any(p > 1):
            raise InvalidInputError("posterior entries outside [0, 1]")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
            raise InvalidInputError("posterior rows do not sum to one")
        dm = data.delta_m == 1
        dt = data.delta_t == 1
        a1 = data.a == 1
        if np.any(p[dm & a1] != np.array([1.0, 0.0, 0.0])):
            raise InvalidInputError("illness events under treatment must be stratum 1")
        if np.any(p[dm, 2] != 0.0):
            raise InvalidInputError("illness events exclude stratum 3")
        if np.any(p[~dm & dt & ~a1] != np.array([0.0, 0.0, 1.0])):
            raise InvalidInputError("direct deaths under control must be stratum 3")
        if np.any(p[~dm & dt, 0] != 0.0):
            raise InvalidInputError("direct deaths exclude stratum 1")


@dataclass(frozen=True)
class FittedModel:
    """Converged (or partial) estimate: coefficients, the three baseline
    hazards, posterior memberships, and the log-likelihood trace."""

    params: ParameterSet
    hazards: tuple[BaselineHazard, BaselineHazard, BaselineHazard]
    posteriors: PosteriorMatrix
    loglik_trace: np.ndarray
    converged: bool
    n_iters: int
    n_clamp_events: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loglik_trace",
                           _freeze(np.asarray(self.loglik_trace, dtype=float)))
        if len(self.hazards) != 3:
            raise InvalidInputError("expected exactly three baseline hazards")

    @property
    def final_loglik(self) -> float:
        return float(self.loglik_trace[-1]) if self.loglik_trace.size else math.nan


def _illness_block(params: ParameterSet, a: int, x: np.ndarray, u: int):
    """Linear predictors (onset, gap) for the illness path of stratum ``u``."""
    if u == 1:
        w = np.concatenate([[float(a)], x])
        return params.eta_m1 @ w, params.eta_r1 @ w
    xt = np.concatenate([[1.0], x])
    return params.eta_m2 @ xt, params.eta_r2 @ xt


def illness_path_survival(t: float, lp_onset: float, lp_gap: float,
                          h_onset: BaselineHazard, h_gap: BaselineHazard) -> float:
    """P(T >= t) for a subject on the illness path: either the onset process
    survives past ``t``, or onset occurs at some jump and the gap process
    survives the remaining time."""
    e_m, _ = clipped_exp(np.array([lp_onset]))
    e_r, _ = clipped_exp(np.array([lp_gap]))
    e_m, e_r = float(e_m[0]), float(e_r[0])
    k = int(np.searchsorted(h_onset.jump_times, t, side="right"))
    total = math.exp(-cumhaz(h_onset, t) * e_m)
    if k:
        jt = h_onset.jump_times[:k]
        lam = h_onset.jump_sizes[:k]
        cum = h_onset.cumulative[:k]
        gap_surv = np.exp(-cumhaz(h_gap, t - jt) * e_r)
        total += float(np.sum(lam * e_m * np.exp(-cum * e_m) * gap_surv))
    return total


def stratum_survival(t: float, x, a: int, u: int, fit: FittedModel) -> float:
    """Model survival P(T >= t | X=x, A=a, U=u) under the fitted model.

    Raises :class:`OutOfSupportError` when ``t`` lies beyond the last jump
    time of any hazard the evaluation needs; estimates out there would be
    flat extrapolations with no empirical content.
    """
    if u not in (1, 2, 3):
        raise InvalidInputError(f"unknown stratum label {u!r}")
    if a not in (0, 1):
        raise InvalidInputError(f"treatment must be 0/1, got {a!r}")
    if not fit.converged:
        raise InvalidInputError("survival evaluation requires a converged fit")
    if t < 0:
        raise InvalidInputError("survival requested at a negative time")
    x = np.asarray(x, dtype=float).ravel()
    h1, h2, h3 = fit.hazards
    if u == 3 or (u == 2 and a == 1):
        if t > h3.support:
            raise OutOfSupportError(
                f"t={t} beyond the direct-death hazard support {h3.support}")
        if u == 3:
            lp = fit.params.eta_t3 @ np.concatenate([[float(a)], x])
        else:
            lp = fit.params.eta_t2 @ np.concatenate([[1.0], x])
        e, _ = clipped_exp(np.array([lp]))
        return math.exp(-cumhaz(h3, t) * float(e[0]))
    check_illness_support(fit, t)
    lp_onset, lp_gap = _illness_block(fit.params, a, x, u)
    return illness_path_survival(t, lp_onset, lp_gap, h1, h2)


def check_illness_support(fit: FittedModel, t: float) -> None:
    """Raise when an illness-path evaluation at ``t`` would leave the onset
    support or push the gap hazard beyond its last jump."""
    h1, h2 = fit.hazards[0], fit.hazards[1]
    if t > h1.support:
        raise OutOfSupportError(
            f"t={t} beyond the onset hazard support {h1.support}")
    if h1.m and t >= h1.jump_times[0] and t - h1.jump_times[0] > h2.support:
        raise OutOfSupportError(
            f"t={t} requires the gap hazard at {t - h1.jump_times[0]}, "
            f"beyond its support {h2.support}")
