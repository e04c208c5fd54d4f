"""Monte Carlo harness: generate, fit, bootstrap, and summarize.

Reproduces the benchmark simulation study at configurable scale.  Each
replicate draws a fresh dataset from the benchmark design, fits it, runs a
bootstrap for standard errors, and evaluates the stratum effects at the
benchmark time points.  Summaries follow the usual layout: truth, mean bias,
empirical SE across replicates, mean bootstrap SE (SEE), and empirical 95%
coverage (CP).
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .em import EmConfig, fit
from .errors import InvalidInputError, NumericalError
from .inference import EffectPoint, WALD_Z, bootstrap
from .simulate import benchmark_spec, true_effect

EFFECT_PROFILE = (0.5, 0.5)
EFFECT_TIMES = {
    "NDE1": (2.0, 4.0, 6.0),
    "NIE1": (2.0, 4.0, 6.0),
    "TE2": (2.0, 4.0, 6.0, 8.0),
    "TE3": (2.0, 4.0, 6.0, 8.0),
}


def default_effect_points() -> tuple[EffectPoint, ...]:
    return tuple(EffectPoint(name=name, t=t, profile=EFFECT_PROFILE)
                 for name, times in EFFECT_TIMES.items() for t in times)


@dataclass(frozen=True)
class ReplicateOutcome:
    index: int
    params: np.ndarray | None
    param_se: np.ndarray | None
    effects: dict | None
    effect_se: dict | None
    error: str | None = None


@dataclass(frozen=True)
class SummaryRow:
    label: str
    truth: float
    bias: float
    se: float
    see: float
    cp: float
    n_used: int


@dataclass(frozen=True)
class StudyResult:
    n: int
    replicates: int
    seed: int
    n_boot: int
    param_names: tuple[str, ...]
    param_rows: tuple[SummaryRow, ...]
    effect_rows: tuple[SummaryRow, ...]
    n_failed_replicates: int
    failures: tuple[str, ...] = ()


def _derived_seed(master: int, *key: int) -> int:
    state = np.random.SeedSequence(entropy=master, spawn_key=key).generate_state(1)
    return int(state[0])


def run_replicate(index: int, n: int, seed: int, n_boot: int,
                  config: EmConfig, effect_points) -> ReplicateOutcome:
    """One Monte Carlo replicate: simulate, fit, bootstrap, evaluate effects."""
    from .simulate import generate

    spec = benchmark_spec(n, seed=_derived_seed(seed, index, 0))
    ds, _ = generate(spec)
    try:
        boot = bootstrap(ds, config=config, n_resamples=n_boot,
                         seed=_derived_seed(seed, index, 1),
                         effect_points=effect_points, warm_start=True)
    except (NumericalError, InvalidInputError) as exc:
        return ReplicateOutcome(index=index, params=None, param_se=None,
                                effects=None, effect_se=None,
                                error=f"replicate {index}: {exc}")
    effects = {}
    effect_se = {}
    for summary in boot.effect_points:
        key = (summary.point.name, summary.point.t)
        effects[key] = summary.estimate
        effect_se[key] = summary.se
    return ReplicateOutcome(index=index, params=boot.estimates,
                            param_se=boot.se, effects=effects,
                            effect_se=effect_se)


def monte_carlo_study(n: int, replicates: int, seed: int = 0, n_boot: int = 100,
                      config: EmConfig | None = None, threads: int = 1,
                      effect_points=None) -> StudyResult:
    """Run the full replicate loop and summarize parameters and effects."""
    if replicates < 2:
        raise InvalidInputError("need at least two replicates to summarize")
    cfg = config or EmConfig()
    points = default_effect_points() if effect_points is None else tuple(effect_points)

    args = [(r, n, seed, n_boot, cfg, points) for r in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_run_replicate_star, args))
    else:
        outcomes = [_run_replicate_star(a) for a in args]
    outcomes.sort(key=lambda o: o.index)

    good = [o for o in outcomes if o.params is not None]
    failures = tuple(o.error for o in outcomes if o.error)
    if len(good) < 2:
        raise NumericalError(
            "fewer than two replicates succeeded: " + "; ".join(failures[:3]))

    spec = benchmark_spec(n, seed=0)
    truth_vec = spec.true_params.to_vector()
    names = tuple(spec.true_params.names())

    est = np.array([o.params for o in good])
    see_mat = np.array([o.param_se for o in good])
    param_rows = []
    for j, name in enumerate(names):
        est_j = est[:, j]
        se_j = see_mat[:, j]
        cover = np.mean(np.abs(est_j - truth_vec[j]) <= WALD_Z * se_j)
        param_rows.append(SummaryRow(
            label=name, truth=float(truth_vec[j]),
            bias=float(est_j.mean() - truth_vec[j]),
            se=float(est_j.std(ddof=1)), see=float(se_j.mean()),
            cp=float(cover), n_used=len(good)))

    effect_rows = []
    for pt in points:
        truth = true_effect(pt.name, pt.t, pt.profile or EFFECT_PROFILE, spec)
        vals, ses = [], []
        for o in good:
            v = o.effects.get((pt.name, pt.t))
            s = o.effect_se.get((pt.name, pt.t))
            if v is not None and np.isfinite(v):
                vals.append(v)
                ses.append(s if s is not None and np.isfinite(s) else np.nan)
        vals = np.array(vals)
        ses = np.array(ses)
        label = f"{pt.name}@t={pt.t:g}"
        if vals.size < 2:
            effect_rows.append(SummaryRow(label=label, truth=truth, bias=np.nan,
                                          se=np.nan, see=np.nan, cp=np.nan,
                                          n_used=int(vals.size)))
            continue
        have_se = np.isfinite(ses)
        cover = (np.mean(np.abs(vals[have_se] - truth) <= WALD_Z * ses[have_se])
                 if np.any(have_se) else np.nan)
        effect_rows.append(SummaryRow(
            label=label, truth=float(truth),
            bias=float(vals.mean() - truth), se=float(vals.std(ddof=1)),
            see=float(np.nanmean(ses)), cp=float(cover), n_used=int(vals.size)))

    return StudyResult(
        n=n, replicates=replicates, seed=seed, n_boot=n_boot,
        param_names=names, param_rows=tuple(param_rows),
        effect_rows=tuple(effect_rows),
        n_failed_replicates=replicates - len(good), failures=failures)


def _run_replicate_star(args):
    return run_replicate(*args)


def table1_rows(study: StudyResult) -> list[list]:
    return [[r.label, r.truth, r.bias, r.se, r.see, r.cp] for r in study.param_rows]


def table2_rows(study: StudyResult) -> list[list]:
    out = []
    for r in study.effect_rows:
        name, _, t_part = r.label.partition("@t=")
        out.append([name, float(t_part) if t_part else np.nan,
                    r.truth, r.bias, r.se, r.see, r.cp, r.n_used])
    return out
