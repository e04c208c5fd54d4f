"""EM estimation of the three-stratum model.

The expectation step computes posterior stratum memberships from the current
coefficients and hazard jumps.  The maximization step solves, per time scale,
the pair of weighted proportional-hazards score equations whose risk-set
denominators couple the two strata sharing that baseline hazard (Newton with
analytic Jacobians on the stacked system), reads the closed-form hazard jumps
off the solved risk sets, and finally solves the weighted multinomial
logistic score for the membership coefficients.  Because the jumps stored at
the end of a sweep are the exact profile maximizers at the new coefficients,
the observed-data log-likelihood is nondecreasing across sweeps.

The outer loop optionally accelerates the EM map by safeguarded vector
extrapolation: an extrapolated candidate is kept only when a subsequent EM
sweep confirms it does not decrease the observed-data log-likelihood, so the
recorded trace stays monotone either way.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateRiskSetError,
    InvalidInputError,
    NumericalDegeneracyError,
    NumericalError,
    RankDeficiencyError,
    SolverFailureError,
)
from .likelihood import component_logs
from .model_core import (
    BaselineHazard,
    Dataset,
    FittedModel,
    HAZARD_LABELS,
    ParameterSet,
    PosteriorMatrix,
    as_dataset,
    clipped_exp,
)

ETA_BLOCKS = ("m1", "m2", "r1", "r2", "t2", "t3")


@dataclass(frozen=True)
class EmConfig:
    """Knobs for the outer EM loop and the inner Newton solves.

    ``accelerate`` turns on safeguarded extrapolation of the EM map (the
    default); set it to False for plain alternation.  ``single_newton_step``
    switches the M-step to one damped Newton update per score equation
    instead of a full inner solve.
    """

    tol: float = 1e-6
    max_outer_iters: int = 5000
    inner_newton_tol: float = 1e-8
    inner_max_iters: int = 50
    step_halving_max: int = 20
    seed: int | None = None
    accelerate: bool = True
    single_newton_step: bool = False
    n_starts: int = 1
    init_params: ParameterSet | None = None
    init_jumps: tuple | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidInputError("tol must be positive")
        for name in ("max_outer_iters", "inner_max_iters", "step_halving_max",
                     "n_starts"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be at least 1")


class _Params:
    """Mutable coefficient container used inside the fit loop; exposes the
    same block attributes as ParameterSet."""

    __slots__ = ("eta_m1", "eta_r1", "eta_m2", "eta_r2", "eta_t2", "eta_t3",
                 "alpha1", "alpha2")

    def __init__(self, **blocks):
        for name in self.__slots__:
            setattr(self, name, np.asarray(blocks[name], dtype=float))

    @classmethod
    def from_set(cls, ps: ParameterSet) -> "_Params":
        return cls(**{name: getattr(ps, name).copy() for name in cls.__slots__})

    def freeze(self) -> ParameterSet:
        return ParameterSet(**{name: getattr(self, name) for name in self.__slots__})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n) for n in self.__slots__])

    def copy(self) -> "_Params":
        return _Params(**{name: getattr(self, name).copy() for name in self.__slots__})


class _Scale:
    """Sorting and risk-set machinery for one event-time scale.

    Subjects are kept in descending time order so that risk-set sums (over
    subjects with time >= a jump time) are prefix sums of one contiguous
    cumulative-sum pass.
    """

    def __init__(self, times: np.ndarray, risk_factor: np.ndarray,
                 event_mask: np.ndarray, jump_times: np.ndarray):
        self.times = times
        self.risk_factor = risk_factor.astype(float)
        self.event_mask = event_mask
        self.jump_times = jump_times
        self.m = jump_times.size
        n = times.size
        order = np.argsort(times, kind="stable")
        start = np.searchsorted(times[order], jump_times, side="left")
        self.order_desc = order[::-1].copy()
        # row (in descending order) of the last subject still at risk
        self.risk_rows = n - start - 1
        # events sit exactly on jump times, so exact lookup is safe
        self.event_jump_idx = np.searchsorted(jump_times, times[event_mask])
        self.event_counts = np.bincount(self.event_jump_idx,
                                        minlength=self.m).astype(float)
        self.risk_desc = self.risk_factor[self.order_desc]

    def attach_designs(self, w: np.ndarray, xt: np.ndarray) -> None:
        self.w_desc = np.ascontiguousarray(w[self.order_desc])
        self.xt_desc = np.ascontiguousarray(xt[self.order_desc])

    def suffix_desc(self, values_desc: np.ndarray) -> np.ndarray:
        """Risk-set sums at every jump for values given in descending order."""
        cum = np.cumsum(values_desc, axis=0)
        return cum[self.risk_rows]

    def suffix_at_jumps(self, weights: np.ndarray) -> np.ndarray:
        """Sum of ``weights`` over subjects with time >= each jump time.

        ``weights`` may be (n,) or (n, k) in subject order.
        """
        return self.suffix_desc(weights[self.order_desc])


class _Index:
    """Precomputed per-dataset arrays shared by every EM step."""

    def __init__(self, ds: Dataset):
        self.ds = ds
        n = ds.n
        self.n = n
        self.w = np.column_stack([ds.a.astype(float), ds.x])
        self.xt = np.column_stack([np.ones(n), ds.x])
        self.q = self.w.shape[1]
        self.dm = ds.delta_m == 1
        self.dt = ds.delta_t == 1
        self.a0 = ds.a == 0
        self.v = np.where(self.dm, ds.y - ds.z, -1.0)

        t1 = np.unique(ds.z[self.dm])
        t2 = np.unique(self.v[self.dm & self.dt])
        t3 = np.unique(ds.y[~self.dm & self.dt])
        r1 = 1.0 - ds.delta_t + ds.delta_m * ds.delta_t
        self.scales = (
            _Scale(ds.z, r1, self.dm, t1),
            _Scale(self.v, self.dm.astype(float), self.dm & self.dt, t2),
            _Scale(ds.y, (~self.dm).astype(float), ~self.dm & self.dt, t3),
        )
        for scale in self.scales:
            scale.attach_designs(self.w, self.xt)
        self.pos_z = np.searchsorted(t1, ds.z, side="right")
        self.pos_v = np.searchsorted(t2, np.where(self.dm, self.v, 0.0), side="right")
        self.pos_y = np.searchsorted(t3, ds.y, side="right")

        self.case1_rows = np.nonzero(self.dm)[0]
        self.case1dt_rows = np.nonzero(self.dm & self.dt)[0]
        self.case2_rows = np.nonzero(~self.dm & self.dt)[0]
        self.kinds = np.where(self.dm, 1, np.where(self.dt, 2, 3))

    def cum_at_subjects(self, jumps: tuple) -> tuple:
        cums = [np.concatenate([[0.0], np.cumsum(j)]) for j in jumps]
        return cums[0][self.pos_z], cums[1][self.pos_v], cums[2][self.pos_y]


# block -> (scale index, design attr, partner block)
_BLOCK_INFO = {
    "m1": (0, "w", "m2"),
    "m2": (0, "xt", "m1"),
    "r1": (1, "w", "r2"),
    "r2": (1, "xt", "r1"),
    "t2": (2, "xt", "t3"),
    "t3": (2, "w", "t2"),
}

# per scale: (block with treatment design, block with intercept design)
_SCALE_PAIRS = (("m1", "m2"), ("r1", "r2"), ("t3", "t2"))


def _block_weight(block: str, post: np.ndarray, idx: _Index) -> np.ndarray:
    """Posterior weight (with arm gating) each subject carries in a block."""
    if block in ("m1", "r1"):
        return post[:, 0]
    if block in ("m2", "r2"):
        return post[:, 1] * idx.a0
    if block == "t2":
        return post[:, 1] * (~idx.a0)
    return post[:, 2]


def _block_eta(params, block: str) -> np.ndarray:
    return getattr(params, f"eta_{block}")


# ---------------------------------------------------------------------------
# Newton machinery


def _newton(score_fn, x0: np.ndarray, tol: float, max_iters: int,
            halving_max: int, what: str, single_step: bool = False):
    """Damped Newton on a score equation with an analytic Jacobian.

    Convergence is checked before the first step, so identically-zero scores
    (for instance under an all-zero design) return the starting point.
    """
    x = np.asarray(x0, dtype=float).copy()
    state = {}
    score, jac = score_fn(x, state)
    norm = float(np.linalg.norm(score))
    if not math.isfinite(norm):
        raise SolverFailureError(f"{what}: non-finite score at the starting point",
                                 residual_norm=norm)
    for _ in range(max_iters):
        if norm < tol:
            return x, state
        delta = _solve_step(jac, score, what)
        step = 1.0
        for _ in range(halving_max + 1):
            x_try = x + step * delta
            state_try = {}
            score_try, jac_try = score_fn(x_try, state_try)
            norm_try = float(np.linalg.norm(score_try))
            if math.isfinite(norm_try) and norm_try < norm:
                break
            step *= 0.5
        else:
            raise SolverFailureError(
                f"{what}: step halving exhausted at score norm {norm:.3e}",
                residual_norm=norm)
        x, score, jac, norm, state = x_try, score_try, jac_try, norm_try, state_try
        if single_step:
            return x, state
    if norm < tol:
        return x, state
    raise SolverFailureError(
        f"{what}: Newton did not reach tolerance {tol:.1e} "
        f"(residual norm {norm:.3e})", residual_norm=norm)


def _solve_step(jac: np.ndarray, score: np.ndarray, what: str) -> np.ndarray:
    """Newton direction; falls back to least squares when flat directions
    carry no score (pinned coordinates stay put), errors otherwise."""
    try:
        return np.linalg.solve(jac, -score)
    except np.linalg.LinAlgError:
        delta, *_ = np.linalg.lstsq(jac, -score, rcond=None)
        residual = np.linalg.norm(jac @ delta + score)
        if residual > 1e-8 * max(1.0, float(np.linalg.norm(score))):
            raise RankDeficiencyError(
                f"{what}: singular system (covariates concentrated on a "
                "hyperplane or separated)") from None
        return delta


def _pair_score(scale: _Scale, q: int, zeta: np.ndarray,
                wr_trt: np.ndarray, wr_int: np.ndarray,
                ev_trt: np.ndarray, ev_int: np.ndarray, state: dict):
    """Stacked score and Jacobian for the two blocks sharing one scale.

    ``zeta`` stacks the treatment-design block coefficients before the
    intercept-design block's.  ``wr_*`` are posterior-times-risk weights in
    descending time order.  ``state`` receives the final risk-set
    denominators so the caller can read the profile hazard jumps off them.
    """
    eta_w, eta_x = zeta[:q], zeta[q:]
    e_w_raw, c1 = clipped_exp(scale.w_desc @ eta_w)
    e_x_raw, c2 = clipped_exp(scale.xt_desc @ eta_x)
    e_w = wr_trt * e_w_raw
    e_x = wr_int * e_x_raw

    n, cols = e_w.size, 2 + 2 * q + 2 * q * q
    stacked = np.empty((n, cols))
    stacked[:, 0] = e_w
    stacked[:, 1] = e_x
    ew_des = np.multiply(e_w[:, None], scale.w_desc, out=stacked[:, 2:2 + q])
    ex_des = np.multiply(e_x[:, None], scale.xt_desc, out=stacked[:, 2 + q:2 + 2 * q])
    np.multiply(ew_des[:, :, None], scale.w_desc[:, None, :],
                out=stacked[:, 2 + 2 * q:2 + 2 * q + q * q].reshape(n, q, q))
    np.multiply(ex_des[:, :, None], scale.xt_desc[:, None, :],
                out=stacked[:, 2 + 2 * q + q * q:].reshape(n, q, q))

    suf = scale.suffix_desc(stacked)
    denom = suf[:, 0] + suf[:, 1]
    d = scale.event_counts
    if np.any(denom <= 0):
        t_bad = float(scale.jump_times[np.nonzero(denom <= 0)[0][0]])
        raise DegenerateRiskSetError(
            f"zero-weight risk set at jump time {t_bad}", jump_time=t_bad)
    state["denom"] = denom
    state["n_clipped"] = c1 + c2

    inv_d = 1.0 / denom
    ratio_w = suf[:, 2:2 + q] * inv_d[:, None]
    ratio_x = suf[:, 2 + q:2 + 2 * q] * inv_d[:, None]

    score = np.concatenate([ev_trt - d @ ratio_w, ev_int - d @ ratio_x])

    d_inv = d * inv_d
    jac = np.empty((2 * q, 2 * q))
    jac[:q, :q] = ((d * ratio_w.T) @ ratio_w
                   - (d_inv @ suf[:, 2 + 2 * q:2 + 2 * q + q * q]).reshape(q, q))
    jac[q:, q:] = ((d * ratio_x.T) @ ratio_x
                   - (d_inv @ suf[:, 2 + 2 * q + q * q:]).reshape(q, q))
    cross = (d * ratio_w.T) @ ratio_x
    jac[:q, q:] = cross
    jac[q:, :q] = cross.T
    return score, jac


def _solve_scale_pair(idx: _Index, scale_i: int, post: np.ndarray,
                      params: _Params, cfg: EmConfig):
    """Jointly solve both coefficient blocks of one scale and return the
    coefficients, the profile hazard jumps, and the clamp count."""
    block_w, block_x = _SCALE_PAIRS[scale_i]
    scale = idx.scales[scale_i]
    q = idx.q
    w_trt = _block_weight(block_w, post, idx)
    w_int = _block_weight(block_x, post, idx)
    wr_trt = (scale.risk_factor * w_trt)[scale.order_desc]
    wr_int = (scale.risk_factor * w_int)[scale.order_desc]
    ev = scale.event_mask
    ev_trt = w_trt[ev] @ idx.w[ev]
    ev_int = w_int[ev] @ idx.xt[ev]
    zeta0 = np.concatenate([_block_eta(params, block_w), _block_eta(params, block_x)])
    n_clipped = 0

    def score_fn(zeta, state):
        score, jac = _pair_score(scale, q, zeta, wr_trt, wr_int,
                                 ev_trt, ev_int, state)
        nonlocal n_clipped
        n_clipped += state.pop("n_clipped")
        return score, jac

    zeta, state = _newton(score_fn, zeta0, cfg.inner_newton_tol,
                          cfg.inner_max_iters, cfg.step_halving_max,
                          f"scale {scale_i} coefficient pair",
                          single_step=cfg.single_newton_step)
    jumps = scale.event_counts / state["denom"]
    return {block_w: zeta[:q], block_x: zeta[q:]}, jumps, n_clipped


# ---------------------------------------------------------------------------
# E-step


def _post_from_comp(idx: _Index, comp: dict) -> np.ndarray:
    """Assemble posterior membership rows from log mixture components."""
    n = idx.n
    post = np.zeros((n, 3))
    dm, dt, a0 = idx.dm, idx.dt, idx.a0

    case1 = dm
    post[case1 & ~a0] = (1.0, 0.0, 0.0)
    sel = case1 & a0
    p1 = _two_way(comp["b1"], comp["b2"], sel, idx.ds.ids)
    post[sel, 0] = p1[sel]
    post[sel, 1] = 1.0 - p1[sel]

    case2 = ~dm & dt
    post[case2 & a0] = (0.0, 0.0, 1.0)
    sel = case2 & ~a0
    p2 = _two_way(comp["c2"], comp["c3"], sel, idx.ds.ids)
    post[sel, 1] = p2[sel]
    post[sel, 2] = 1.0 - p2[sel]

    case3 = ~dm & ~dt
    if np.any(case3):
        stack = np.stack([comp["d1"], comp["d2"], comp["d3"]], axis=1)
        m = stack.max(axis=1, keepdims=True)
        finite = np.isfinite(m[:, 0])
        if np.any(case3 & ~finite):
            bad = [idx.ds.ids[i] for i in np.nonzero(case3 & ~finite)[0]]
            raise NumericalDegeneracyError(
                f"all membership weights underflowed for subjects {bad[:5]}",
                subject_ids=bad)
        e = np.exp(stack - np.where(np.isfinite(m), m, 0.0))
        post[case3] = (e / e.sum(axis=1, keepdims=True))[case3]
    return post


def _two_way(log_a: np.ndarray, log_b: np.ndarray, mask: np.ndarray, ids):
    """First-component probability of a two-part log mixture, where valid."""
    out = np.zeros(log_a.shape)
    if not np.any(mask):
        return out
    la, lb = log_a[mask], log_b[mask]
    m = np.maximum(la, lb)
    bad = ~np.isfinite(m)
    if np.any(bad):
        bad_ids = [ids[i] for i in np.nonzero(mask)[0][np.nonzero(bad)[0]]]
        raise NumericalDegeneracyError(
            f"all membership weights underflowed for subjects {bad_ids[:5]}",
            subject_ids=bad_ids)
    ea = np.exp(la - m)
    eb = np.exp(lb - m)
    out[mask] = ea / (ea + eb)
    return out


def e_step(data, params: ParameterSet, hazards) -> PosteriorMatrix:
    """Posterior membership probabilities given the current estimate.

    Observed intermediate events pin membership to stratum 1 (treated arm)
    or split it between strata 1 and 2 (control arm); direct deaths split
    between strata 2 and 3 (treated) or pin stratum 3 (control); fully
    censored subjects mix all three.  Ratios are formed after a max-shift in
    log space.
    """
    from .model_core import cumhaz

    ds = as_dataset(data)
    idx = _Index(ds)
    cum1 = cumhaz(hazards[0], ds.z)
    cum2 = cumhaz(hazards[1], np.where(idx.dm, idx.v, 0.0))
    cum3 = cumhaz(hazards[2], ds.y)
    comp, _ = component_logs(ds, params, cum1, cum2, cum3)
    return PosteriorMatrix(probs=_post_from_comp(idx, comp))


# ---------------------------------------------------------------------------
# Public M-step operations


def m_step_hazards(data, posteriors: PosteriorMatrix, params: ParameterSet):
    """Closed-form hazard-jump updates given posterior memberships.

    Each jump is the event count at the jump time divided by the
    posterior-weighted exposure of the subjects still at risk there.
    """
    ds = as_dataset(data)
    idx = _Index(ds)
    post = np.asarray(posteriors.probs, dtype=float)
    jumps, _ = _hazard_jumps_core(idx, post, params)
    return tuple(
        BaselineHazard(jump_times=scale.jump_times, jump_sizes=j, label=label)
        for scale, j, label in zip(idx.scales, jumps, HAZARD_LABELS)
    )


def _hazard_jumps_core(idx: _Index, post: np.ndarray, params):
    n_clipped = 0
    e = {}
    for block in ETA_BLOCKS:
        _, design_attr, _ = _BLOCK_INFO[block]
        vals, c = clipped_exp(getattr(idx, design_attr) @ _block_eta(params, block))
        e[block] = vals
        n_clipped += c
    a1 = ~idx.a0
    s1 = post[:, 0] * e["m1"] + post[:, 1] * idx.a0 * e["m2"]
    s2 = post[:, 0] * e["r1"] + post[:, 1] * idx.a0 * e["r2"]
    s3 = post[:, 1] * a1 * e["t2"] + post[:, 2] * e["t3"]

    jumps = []
    for scale, s in zip(idx.scales, (s1, s2, s3)):
        denom = scale.suffix_at_jumps(scale.risk_factor * s)
        bad = (scale.event_counts > 0) & (denom <= 0)
        if np.any(bad):
            t_bad = float(scale.jump_times[bad][0])
            raise DegenerateRiskSetError(
                f"zero-weight risk set at jump time {t_bad}", jump_time=t_bad)
        jumps.append(scale.event_counts / np.where(denom > 0, denom, 1.0))
    return tuple(jumps), n_clipped


def m_step_eta(block: str, data, posteriors: PosteriorMatrix, hazards=None,
               warm_start=None, params: ParameterSet | None = None,
               config: EmConfig | None = None) -> np.ndarray:
    """Solve one coefficient block's weighted score equation.

    The score is the posterior-weighted proportional-hazards score on the
    block's time scale; its risk-set denominator carries both strata that
    share the baseline hazard, with the partner block's coefficients held at
    their current values (``params``).
    """
    block = block.lower().replace("eta_", "")
    if block not in _BLOCK_INFO:
        raise InvalidInputError(f"unknown coefficient block {block!r}")
    ds = as_dataset(data)
    idx = _Index(ds)
    cfg = config or EmConfig()
    post = np.asarray(posteriors.probs, dtype=float)
    if params is None:
        params = ParameterSet.zeros(ds.p)
    if hazards is not None:
        _check_jump_alignment(idx, hazards)
    eta0 = np.asarray(warm_start, dtype=float) if warm_start is not None \
        else _block_eta(params, block).copy()

    def score_fn(eta, state):
        score, jac = _single_block_score(idx, block, eta, params, post)
        return score, jac

    eta, _ = _newton(score_fn, eta0, cfg.inner_newton_tol, cfg.inner_max_iters,
                     cfg.step_halving_max, f"eta_{block}",
                     single_step=cfg.single_newton_step)
    return eta


def _single_block_score(idx: _Index, block: str, eta: np.ndarray,
                        params, post: np.ndarray):
    """Score and Jacobian of one block's equation with its partner fixed."""
    scale_i, design_attr, partner = _BLOCK_INFO[block]
    scale = idx.scales[scale_i]
    design = getattr(idx, design_attr)
    part_design = getattr(idx, _BLOCK_INFO[partner][1])
    q = idx.q

    w_self = _block_weight(block, post, idx)
    w_part = _block_weight(partner, post, idx)
    e_part_raw, _ = clipped_exp(part_design @ _block_eta(params, partner))
    e_self_raw, _ = clipped_exp(design @ eta)
    e_self = scale.risk_factor * w_self * e_self_raw
    e_part = scale.risk_factor * w_part * e_part_raw

    weighted = e_self[:, None] * design
    stacked = np.concatenate(
        [(e_self + e_part)[:, None], weighted,
         (weighted[:, :, None] * design[:, None, :]).reshape(idx.n, q * q)], axis=1)
    suf = scale.suffix_at_jumps(stacked)
    denom = suf[:, 0]
    d = scale.event_counts
    live = d > 0
    if np.any(denom[live] <= 0):
        t_bad = float(scale.jump_times[live][np.nonzero(denom[live] <= 0)[0][0]])
        raise DegenerateRiskSetError(
            f"zero-weight risk set at jump time {t_bad}", jump_time=t_bad)
    inv_d = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
    ratio = suf[:, 1:1 + q] * inv_d[:, None]
    m2 = suf[:, 1 + q:].reshape(scale.m, q, q)
    ev = scale.event_mask
    score = (w_self[ev, None] * design[ev]).sum(axis=0) - d @ ratio
    jac = -(np.einsum("l,lij->ij", d * inv_d, m2)
            - np.einsum("l,li,lj->ij", d, ratio, ratio))
    return score, jac


def eta_score_jacobian(block: str, eta, data, posteriors: PosteriorMatrix,
                       params: ParameterSet):
    """Score and analytic Jacobian of one block's equation at ``eta``.

    Exposed so the Jacobian can be checked against finite differences of the
    score.
    """
    block = block.lower().replace("eta_", "")
    ds = as_dataset(data)
    idx = _Index(ds)
    post = np.asarray(posteriors.probs, dtype=float)
    return _single_block_score(idx, block, np.asarray(eta, dtype=float), params, post)


def _check_jump_alignment(idx: _Index, hazards) -> None:
    for scale, h in zip(idx.scales, hazards):
        if h.m != scale.m or not np.array_equal(h.jump_times, scale.jump_times):
            raise InvalidInputError(
                "hazard jump times do not match the dataset's event times")


def alpha_score_hessian(alpha_vec, x_matrix, posteriors: PosteriorMatrix):
    """Stacked membership score (strata 1 and 2) and its Hessian."""
    x_matrix = np.asarray(x_matrix, dtype=float)
    if x_matrix.ndim == 1:
        x_matrix = x_matrix.reshape(-1, 1)
    n = x_matrix.shape[0]
    xt = np.column_stack([np.ones(n), x_matrix])
    q = xt.shape[1]
    alpha_vec = np.asarray(alpha_vec, dtype=float)
    post = np.asarray(posteriors.probs, dtype=float)
    lps = np.column_stack([xt @ alpha_vec[:q], xt @ alpha_vec[q:], np.zeros(n)])
    lps -= lps.max(axis=1, keepdims=True)
    e = np.exp(lps)
    w = e / e.sum(axis=1, keepdims=True)
    score = np.concatenate([
        (post[:, 0] - w[:, 0]) @ xt,
        (post[:, 1] - w[:, 1]) @ xt,
    ])
    h11 = -(xt * (w[:, 0] * (1 - w[:, 0]))[:, None]).T @ xt
    h22 = -(xt * (w[:, 1] * (1 - w[:, 1]))[:, None]).T @ xt
    h12 = (xt * (w[:, 0] * w[:, 1])[:, None]).T @ xt
    hess = np.block([[h11, h12], [h12.T, h22]])
    return score, hess


def m_step_alpha(posteriors: PosteriorMatrix, covariates, warm_start=None,
                 config: EmConfig | None = None):
    """Solve the posterior-weighted multinomial logistic score for the
    membership coefficients."""
    cfg = config or EmConfig()
    x_matrix = np.asarray(covariates, dtype=float)
    if x_matrix.ndim == 1:
        x_matrix = x_matrix.reshape(-1, 1)
    q = x_matrix.shape[1] + 1
    if warm_start is None:
        a0 = np.zeros(2 * q)
    else:
        a0 = np.asarray(warm_start, dtype=float).ravel()
        if a0.size != 2 * q:
            raise InvalidInputError("warm start has the wrong length")

    def score_fn(vec, state):
        return alpha_score_hessian(vec, x_matrix, posteriors)

    vec, _ = _newton(score_fn, a0, cfg.inner_newton_tol, cfg.inner_max_iters,
                     cfg.step_halving_max, "alpha",
                     single_step=cfg.single_newton_step)
    return vec[:q], vec[q:]


# ---------------------------------------------------------------------------
# Outer loop


class _State:
    """One EM iterate: coefficients, jumps, and the log mixture components
    and log-likelihood evaluated at them."""

    __slots__ = ("params", "jumps", "comp", "loglik")

    def __init__(self, params: _Params, jumps: tuple, comp: dict, loglik: float):
        self.params = params
        self.jumps = jumps
        self.comp = comp
        self.loglik = loglik

    def vector(self) -> np.ndarray:
        return np.concatenate([self.params.to_vector(), *self.jumps])

    def accel_vector(self) -> np.ndarray:
        return np.concatenate([self.params.to_vector(),
                               *(np.log(j) for j in self.jumps)])


def _make_state(idx: _Index, params: _Params, jumps: tuple,
                clamp_counter: list) -> _State:
    cum1, cum2, cum3 = idx.cum_at_subjects(jumps)
    comp, c = component_logs(idx.ds, params, cum1, cum2, cum3)
    clamp_counter[0] += c
    loglik = _loglik_from_comp(idx, comp, jumps)
    return _State(params, jumps, comp, loglik)


def _loglik_from_comp(idx: _Index, comp: dict, jumps: tuple) -> float:
    """Observed-data log-likelihood assembled from precomputed components."""
    neg_inf = -np.inf
    stack1 = np.stack([comp["b1"], comp["b2"]])
    m1 = stack1.max(axis=0)
    safe1 = np.where(np.isfinite(m1), m1, 0.0)
    logs1 = safe1 + np.log(np.exp(stack1[0] - safe1) + np.exp(stack1[1] - safe1))
    logs1 = np.where(np.isfinite(m1), logs1, neg_inf)

    stack2 = np.stack([comp["c2"], comp["c3"]])
    m2 = stack2.max(axis=0)
    safe2 = np.where(np.isfinite(m2), m2, 0.0)
    logs2 = safe2 + np.log(np.exp(stack2[0] - safe2) + np.exp(stack2[1] - safe2))
    logs2 = np.where(np.isfinite(m2), logs2, neg_inf)

    d2 = np.where(idx.a0, comp["d2"], neg_inf)
    stack3 = np.stack([comp["c2"], comp["c3"], comp["d1"], d2])
    m3 = stack3.max(axis=0)
    safe3 = np.where(np.isfinite(m3), m3, 0.0)
    with np.errstate(invalid="ignore"):
        logs3 = safe3 + np.log(np.sum(np.exp(stack3 - safe3), axis=0))
    logs3 = np.where(np.isfinite(m3), logs3, neg_inf)

    logs = np.where(idx.dm, logs1, np.where(idx.dt, logs2, logs3))
    jump_term = np.zeros(idx.n)
    log_j1 = np.log(jumps[0])
    log_j2 = np.log(jumps[1]) if jumps[1].size else jumps[1]
    log_j3 = np.log(jumps[2]) if jumps[2].size else jumps[2]
    jump_term[idx.case1_rows] = log_j1[idx.scales[0].event_jump_idx]
    jump_term[idx.case1dt_rows] += log_j2[idx.scales[1].event_jump_idx]
    jump_term[idx.case2_rows] = log_j3[idx.scales[2].event_jump_idx]
    logs = logs + jump_term - comp["log_denom"]
    bad = ~np.isfinite(logs)
    if np.any(bad):
        bad_ids = [idx.ds.ids[i] for i in np.nonzero(bad)[0]]
        raise NumericalDegeneracyError(
            f"likelihood underflowed to zero for subjects {bad_ids[:5]}",
            subject_ids=bad_ids)
    return math.fsum(logs.tolist())


def _sweep(idx: _Index, st: _State, cfg: EmConfig, clamp_counter: list) -> _State:
    """One full EM sweep: E-step at the current state, then the per-scale
    coefficient-pair solves (whose risk sets yield the new jumps), then the
    membership solve."""
    post = _post_from_comp(idx, st.comp)
    params = st.params.copy()
    new_jumps = []
    for scale_i in range(3):
        blocks, jumps_k, c = _solve_scale_pair(idx, scale_i, post, params, cfg)
        clamp_counter[0] += c
        for name, value in blocks.items():
            setattr(params, f"eta_{name}", value)
        new_jumps.append(jumps_k)
    a1, a2 = m_step_alpha(PosteriorMatrix(probs=post), idx.ds.x,
                          warm_start=np.concatenate([params.alpha1, params.alpha2]),
                          config=cfg)
    params.alpha1, params.alpha2 = a1, a2
    return _make_state(idx, params, tuple(new_jumps), clamp_counter)


def _check_preconditions(idx: _Index) -> None:
    labels = ("intermediate events", "gap-time events", "direct deaths")
    for scale, label in zip(idx.scales, labels):
        if scale.m < 1:
            raise InvalidInputError(f"dataset has no {label}; the model is not estimable")
    x = idx.ds.x
    if x.shape[1]:
        centered = x - x.mean(axis=0)
        rank = np.linalg.matrix_rank(centered)
        if rank < x.shape[1]:
            warnings.warn(
                "covariates appear collinear; stratum-distinguishing effects "
                "may not be identifiable", stacklevel=3)


def fit(data, config: EmConfig | None = None) -> FittedModel:
    """Maximize the observed-data likelihood by EM.

    Starts from zero coefficients and uniform hazard jumps (or the warm start
    in ``config``), alternates the E and M steps, and stops when every
    coefficient and jump moves by less than ``config.tol`` over one plain
    sweep.  Exceeding the iteration cap returns a partial fit flagged
    ``converged=False`` rather than raising.
    """
    cfg = config or EmConfig()
    ds = as_dataset(data)
    ds.validate()
    idx = _Index(ds)
    _check_preconditions(idx)

    if cfg.n_starts > 1:
        return _multi_start_fit(ds, idx, cfg)
    return _fit_from(idx, cfg, cfg.init_params, cfg.init_jumps)


def _multi_start_fit(ds: Dataset, idx: _Index, cfg: EmConfig) -> FittedModel:
    rng = np.random.default_rng(cfg.seed)
    best = None
    for start in range(cfg.n_starts):
        if start == 0:
            init = cfg.init_params
        else:
            jitter = rng.uniform(-0.5, 0.5, size=8 * (ds.p + 1))
            init = ParameterSet.from_vector(jitter, ds.p)
        candidate = _fit_from(idx, cfg, init, None)
        if best is None:
            best = candidate
        elif candidate.converged and (not best.converged or
                                      candidate.final_loglik
                                      > best.final_loglik + 1e-12):
            best = candidate
    return best


def _fit_from(idx: _Index, cfg: EmConfig,
              init_params: ParameterSet | None,
              init_jumps: tuple | None) -> FittedModel:
    params = _Params.from_set(init_params) if init_params is not None \
        else _Params.from_set(ParameterSet.zeros(idx.ds.p))
    if init_jumps is not None:
        jumps = tuple(np.asarray(j, dtype=float).copy() for j in init_jumps)
        for j, scale in zip(jumps, idx.scales):
            if j.size != scale.m:
                raise InvalidInputError("warm-start jumps do not match the event times")
            if np.any(j <= 0):
                raise InvalidInputError("warm-start jumps must be positive")
    else:
        jumps = tuple(np.full(scale.m, 1.0 / scale.m) for scale in idx.scales)

    clamp = [0]
    state = _make_state(idx, params, jumps, clamp)
    trace = [state.loglik]
    converged = False
    sweeps = 0

    while sweeps < cfg.max_outer_iters:
        prev_vec = state.vector()
        s1 = _checked_sweep(idx, state, cfg, clamp, sweeps + 1)
        sweeps += 1
        trace.append(s1.loglik)
        if float(np.max(np.abs(s1.vector() - prev_vec))) < cfg.tol:
            state = s1
            converged = True
            break
        if not cfg.accelerate or sweeps + 2 > cfg.max_outer_iters:
            state = s1
            continue

        s2 = _checked_sweep(idx, s1, cfg, clamp, sweeps + 1)
        sweeps += 1
        trace.append(s2.loglik)
        if float(np.max(np.abs(s2.vector() - s1.vector()))) < cfg.tol:
            state = s2
            converged = True
            break
        state = _try_extrapolation(idx, state, s1, s2, cfg, clamp, trace)
        if state is s2:
            continue
        sweeps += 1

    posteriors = PosteriorMatrix(probs=_post_from_comp(idx, state.comp))
    if clamp[0]:
        warnings.warn(
            f"{clamp[0]} linear-predictor values were clamped to +/-700 "
            "during fitting", stacklevel=3)
    hazards = tuple(
        BaselineHazard(jump_times=scale.jump_times, jump_sizes=j, label=label)
        for scale, j, label in zip(idx.scales, state.jumps, HAZARD_LABELS)
    )
    return FittedModel(
        params=state.params.freeze(), hazards=hazards, posteriors=posteriors,
        loglik_trace=np.asarray(trace), converged=converged, n_iters=sweeps,
        n_clamp_events=clamp[0],
    )


def _checked_sweep(idx: _Index, st: _State, cfg: EmConfig, clamp: list,
                   iteration: int) -> _State:
    """A plain sweep whose failures carry the outer-iteration number."""
    try:
        return _sweep(idx, st, cfg, clamp)
    except NumericalError as exc:
        raise exc.__class__(f"EM iteration {iteration}: {exc}") from exc


def _try_extrapolation(idx: _Index, s0: _State, s1: _State, s2: _State,
                       cfg: EmConfig, clamp: list, trace: list) -> _State:
    """Squared-step extrapolation of the EM map with a monotonicity
    safeguard: the candidate is kept only if one further sweep from it does
    not lower the log-likelihood reached by the plain path."""
    v0, v1, v2 = s0.accel_vector(), s1.accel_vector(), s2.accel_vector()
    r = v1 - v0
    v = (v2 - v1) - r
    vv = float(v @ v)
    if vv <= 0 or not math.isfinite(vv):
        return s2
    alpha = -math.sqrt(float(r @ r) / vv)
    alpha = min(-1.0, max(alpha, -64.0))
    if alpha == -1.0:
        return s2
    cand_vec = v0 - 2.0 * alpha * r + alpha * alpha * v
    try:
        cand = _state_from_accel_vector(idx, cand_vec, clamp)
        stabilized = _sweep(idx, cand, cfg, clamp)
    except NumericalError:
        return s2
    if not math.isfinite(stabilized.loglik) or stabilized.loglik < s2.loglik:
        return s2
    trace.append(stabilized.loglik)
    return stabilized


def _state_from_accel_vector(idx: _Index, vec: np.ndarray, clamp: list) -> _State:
    q = idx.q
    theta = vec[:8 * q]
    params = _Params(**{name: theta[k * q:(k + 1) * q]
                        for k, name in enumerate(_Params.__slots__)})
    offset = 8 * q
    jumps = []
    with np.errstate(over="ignore"):
        for scale in idx.scales:
            jumps.append(np.exp(vec[offset:offset + scale.m]))
            offset += scale.m
    return _make_state(idx, params, tuple(jumps), clamp)
