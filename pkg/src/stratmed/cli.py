"""Command-line interface.

Subcommands: ``simulate``, ``fit``, ``effects``, ``diagnose``, ``bootstrap``,
``reproduce``, ``sensitivity``.  Exit codes form a stable contract for
scripting: 0 success, 1 numerical failure, 2 input or validation failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io
from .effects import default_grid, effect_curve, marginal_effect_curves
from .em import EmConfig, fit
from .errors import InvalidInputError, NumericalError, StratmedError
from .inference import (
    EffectPoint,
    bootstrap,
    label_swap_sensitivity,
    wald_tests,
)
from .likelihood import kaplan_meier, population_average_survival
from .model_core import Dataset, ParameterSet
from .reproduce import monte_carlo_study, table1_rows, table2_rows
from .simulate import benchmark_spec, generate

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_INPUT = 2


def _add_common(parser: argparse.ArgumentParser, with_input: bool = True) -> None:
    if with_input:
        parser.add_argument("--input", required=True, help="analysis CSV path")
    parser.add_argument("--out-dir", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tol", type=float, default=1e-6)
    parser.add_argument("--max-iters", type=int, default=5000)
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)


def _em_config(args) -> EmConfig:
    return EmConfig(tol=args.tol, max_outer_iters=args.max_iters)


def _parse_grid(spec: str | None, ds: Dataset | None):
    if spec is None:
        if ds is None:
            raise InvalidInputError("a --grid is required here")
        return default_grid(ds)
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise InvalidInputError("--grid expects start:stop:count or a comma list")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 2 or stop <= start:
            raise InvalidInputError("--grid range must have stop > start and count >= 2")
        return np.linspace(start, stop, count)
    return np.array([float(v) for v in spec.split(",")])


def _parse_profile(text: str, p: int) -> tuple:
    values = {}
    for item in text.split(","):
        key, _, val = item.partition("=")
        key = key.strip()
        if not key.startswith("x") or not val:
            raise InvalidInputError(f"bad profile entry {item!r}; expected x<j>=<value>")
        values[int(key[1:])] = float(val)
    if sorted(values) != list(range(1, p + 1)):
        raise InvalidInputError(
            f"profile must set exactly x1..x{p}, got {sorted(values)}")
    return tuple(values[j] for j in range(1, p + 1))


def _standardized(ds: Dataset) -> Dataset:
    x = ds.x
    scale = x.std(axis=0, ddof=0)
    scale[scale == 0] = 1.0
    return Dataset(ds.ids, ds.a, ds.z, ds.delta_m, ds.y, ds.delta_t,
                   (x - x.mean(axis=0)) / scale)


def cmd_simulate(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    if args.spec_json:
        with open(args.spec_json, encoding="utf-8") as fh:
            payload = json.load(fh)
        from .simulate import AnalyticHazard, GenerativeSpec
        spec = GenerativeSpec(
            n=args.n, seed=args.seed,
            true_params=ParameterSet(**{k: np.array(v)
                                        for k, v in payload["true_params"].items()}),
            hazard_onset=AnalyticHazard(**payload["hazard_onset"]),
            hazard_gap=AnalyticHazard(**payload["hazard_gap"]),
            hazard_direct=AnalyticHazard(**payload["hazard_direct"]),
            censoring_max=payload.get("censoring_max", 15.0),
            covariates=tuple(payload.get("covariates", ("normal", "uniform"))),
        )
    else:
        cmax = None if args.no_censoring else args.c_max
        spec = benchmark_spec(args.n, seed=args.seed, censoring_max=cmax)
    ds, truth = generate(spec)
    io.write_subjects_csv(os.path.join(args.out_dir, "data.csv"), ds)
    io.write_truth_csv(os.path.join(args.out_dir, "truth.csv"), ds, truth)
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = io.read_subjects_csv(args.input)
    if args.standardize:
        ds = _standardized(ds)
    os.makedirs(args.out_dir, exist_ok=True)
    cfg = _em_config(args)
    if args.warm_start:
        warm = io.read_fit_artifacts(args.warm_start)
        from dataclasses import replace
        cfg = replace(cfg, init_params=warm.params,
                      init_jumps=tuple(h.jump_sizes for h in warm.hazards))
    result = fit(ds, cfg)
    io.write_fit_artifacts(args.out_dir, result, ds, tol=args.tol)
    if not result.converged:
        print(f"fit did not converge within {args.max_iters} iterations",
              file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_effects(args) -> int:
    ds = io.read_subjects_csv(args.input)
    fit_dir = args.fit_dir or args.out_dir
    fitted = io.read_fit_artifacts(fit_dir)
    if not fitted.converged:
        raise InvalidInputError("stored fit is not converged; refit first")
    os.makedirs(args.out_dir, exist_ok=True)
    grid = _parse_grid(args.grid, ds)
    from .likelihood import _mixture_support
    grid = grid[grid <= _mixture_support(fitted)]

    profiles = [_parse_profile(p, ds.p) for p in (args.profile or [])]
    rows = []
    point_specs = []
    for x in profiles:
        for name in ("NIE1", "NDE1", "TE1", "TE2", "TE3"):
            curve = effect_curve(name, fitted, grid, x)
            for t, v in zip(curve.grid, curve.values):
                rows.append({"name": name, "t": t, "value": v,
                             "profile": io.profile_string(x)})
                if name != "TE1":
                    point_specs.append(EffectPoint(name=name, t=float(t), profile=x))
    nie_m, nde_m = marginal_effect_curves(fitted, ds, grid)
    for curve in (nie_m, nde_m):
        for t, v in zip(curve.grid, curve.values):
            rows.append({"name": curve.name, "t": t, "value": v, "profile": ""})
            point_specs.append(EffectPoint(name=curve.name, t=float(t), profile=None))

    if args.bootstrap_n > 0:
        boot = bootstrap(ds, config=_em_config(args), n_resamples=args.bootstrap_n,
                         seed=args.seed, effect_points=tuple(point_specs),
                         threads=args.threads, base_fit=fitted)
        by_key = {}
        for s in boot.effect_points:
            key = (s.point.name, s.point.t,
                   io.profile_string(s.point.profile) if s.point.profile else "")
            by_key[key] = s
        for row in rows:
            s = by_key.get((row["name"], row["t"], row["profile"]))
            if s is not None:
                row["se"], row["ci_low"], row["ci_high"] = s.se, s.ci_low, s.ci_high
    io.write_effects_csv(os.path.join(args.out_dir, "effects.csv"), rows)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    ds = io.read_subjects_csv(args.input)
    fit_dir = args.fit_dir or args.out_dir
    fitted = io.read_fit_artifacts(fit_dir)
    os.makedirs(args.out_dir, exist_ok=True)
    grid = _parse_grid(args.grid, ds)
    rows = []
    for arm in sorted(set(ds.a.tolist())):
        used_grid, model_avg = population_average_survival(fitted, ds, arm, grid)
        sel = ds.a == arm
        km = kaplan_meier(ds.y[sel], ds.delta_t[sel])
        km_vals = km.evaluate(used_grid)
        for t, mv, kv in zip(used_grid, model_avg, km_vals):
            rows.append({"arm": arm, "t": t, "model_avg": mv, "km": kv})
    io.write_overlay_csv(os.path.join(args.out_dir, "survival_overlay.csv"), rows)
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    ds = io.read_subjects_csv(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    base = None
    if args.fit_dir:
        base = io.read_fit_artifacts(args.fit_dir)
    boot = bootstrap(ds, config=_em_config(args), n_resamples=args.bootstrap_n,
                     seed=args.seed, threads=args.threads,
                     interval="percentile" if args.percentile else "wald",
                     base_fit=base)
    tests = wald_tests(boot.base_fit, boot)
    io.write_json(os.path.join(args.out_dir, "boot.json"), {
        "seed": boot.seed,
        "n_resamples": boot.n_resamples,
        "n_failed_resamples": boot.n_failed_resamples,
        "interval": boot.interval,
        "parameters": [
            {"name": t.name, "estimate": t.estimate, "se": t.se,
             "ci_low": float(lo), "ci_high": float(hi),
             "z": t.z, "p_value": t.p_value}
            for t, lo, hi in zip(tests, boot.ci_low, boot.ci_high)
        ],
    })
    return EXIT_OK


def cmd_reproduce(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    study = monte_carlo_study(n=args.n, replicates=args.replicates,
                              seed=args.seed, n_boot=args.bootstrap_n,
                              config=_em_config(args), threads=args.threads)
    if args.which == "table1":
        io.write_table_csv(os.path.join(args.out_dir, "table1.csv"),
                           ["parameter", "truth", "bias", "se", "see", "cp"],
                           table1_rows(study))
    else:
        io.write_table_csv(os.path.join(args.out_dir, "table2.csv"),
                           ["effect", "t", "truth", "bias", "se", "see", "cp",
                            "n_used"],
                           table2_rows(study))
    if study.failures:
        print(f"{study.n_failed_replicates} replicates failed:", file=sys.stderr)
        for msg in study.failures:
            print(f"  {msg}", file=sys.stderr)
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    ds = io.read_subjects_csv(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    result = label_swap_sensitivity(ds, config=_em_config(args))
    io.write_json(os.path.join(args.out_dir, "sensitivity.json"), {
        "avg_w2_original": result.avg_w2_original,
        "avg_w2_swapped": result.avg_w2_swapped,
        "original_converged": result.original_converged,
        "swapped_converged": result.swapped_converged,
        "original_iters": result.original_iters,
        "swapped_iters": result.swapped_iters,
    })
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratmed",
        description="Stratum-specific mediation analysis for semi-competing "
                    "risks survival data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    _add_common(p, with_input=False)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--c-max", type=float, default=15.0)
    p.add_argument("--no-censoring", action="store_true")
    p.add_argument("--spec-json", help="JSON file overriding the generative law")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the model to an analysis CSV")
    _add_common(p)
    p.add_argument("--standardize", action="store_true",
                   help="center/scale covariates before fitting")
    p.add_argument("--warm-start", help="directory with previous fit artifacts")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("effects", help="evaluate effect curves from a fit")
    _add_common(p)
    p.add_argument("--fit-dir", help="directory with fit artifacts (default: out-dir)")
    p.add_argument("--grid", help="start:stop:count or comma-separated times")
    p.add_argument("--profile", action="append",
                   help="covariate profile like x1=0.5,x2=0.5 (repeatable)")
    p.add_argument("--bootstrap-n", type=int, default=0,
                   help="bootstrap resamples for bands (0 = point estimates only)")
    p.set_defaults(func=cmd_effects)

    p = sub.add_parser("diagnose",
                       help="model-average survival vs Kaplan-Meier overlay")
    _add_common(p)
    p.add_argument("--fit-dir", help="directory with fit artifacts (default: out-dir)")
    p.add_argument("--grid", help="start:stop:count or comma-separated times")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("bootstrap", help="bootstrap SEs, CIs, and Wald tests")
    _add_common(p)
    p.add_argument("--fit-dir", help="reuse stored fit artifacts as the base fit")
    p.add_argument("--bootstrap-n", type=int, default=100)
    p.add_argument("--percentile", action="store_true",
                   help="percentile intervals instead of Wald")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("reproduce", help="run the benchmark Monte Carlo study")
    _add_common(p, with_input=False)
    p.add_argument("--which", choices=("table1", "table2"), required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--bootstrap-n", type=int, default=100)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("sensitivity", help="label-swap membership diagnostic")
    _add_common(p)
    p.set_defaults(func=cmd_sensitivity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, StratmedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
