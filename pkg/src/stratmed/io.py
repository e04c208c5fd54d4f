"""File formats: the analysis CSV, fit artifacts, and result tables.

The analysis CSV carries one subject per row with header
``id,a,z,delta_m,y,delta_t,x1,...,xp``.  All writers are deterministic:
floats use the shortest round-trip representation, JSON keys are sorted, and
no timestamps are embedded, so identical inputs yield byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .model_core import (
    BaselineHazard,
    Dataset,
    FittedModel,
    HAZARD_LABELS,
    ParameterSet,
    PosteriorMatrix,
)
from .simulate import HiddenTruth

SCHEMA_VERSION = 1
_SUBJECT_FIXED_COLS = ("id", "a", "z", "delta_m", "y", "delta_t")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return ""
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def read_subjects_csv(path: str) -> Dataset:
    """Parse and validate the analysis CSV, reporting every bad row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty file") from None
        rows = list(reader)

    header = [h.strip() for h in header]
    if tuple(header[:6]) != _SUBJECT_FIXED_COLS:
        raise InvalidInputError(
            f"{path}: header must start with {','.join(_SUBJECT_FIXED_COLS)}, "
            f"got {','.join(header[:6])}")
    x_cols = header[6:]
    expected = [f"x{j}" for j in range(1, len(x_cols) + 1)]
    if x_cols != expected:
        raise InvalidInputError(
            f"{path}: covariate columns must be {','.join(expected) or '(none)'}, "
            f"got {','.join(x_cols)}")
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")

    p = len(x_cols)
    problems: list[str] = []
    ids, a, z, dm, y, dt = [], [], [], [], [], []
    x = np.empty((len(rows), p))
    for i, row in enumerate(rows, start=1):
        if len(row) != 6 + p:
            problems.append(f"row {i}: expected {6 + p} fields, got {len(row)}")
            continue
        ids.append(row[0])
        try:
            a.append(int(row[1]))
            z.append(float(row[2]))
            dm.append(int(row[3]))
            y.append(float(row[4]))
            dt.append(int(row[5]))
            x[i - 1] = [float(v) for v in row[6:]]
        except ValueError as exc:
            problems.append(f"row {i}: {exc}")
            a.append(0)
            z.append(0.0)
            dm.append(0)
            y.append(0.0)
            dt.append(0)
            x[i - 1] = 0.0
    if problems:
        raise InvalidInputError(f"{path}: " + "; ".join(problems))

    ds = Dataset(ids=ids, a=a, z=z, delta_m=dm, y=y, delta_t=dt, x=x)
    try:
        ds.validate()
    except InvalidInputError as exc:
        raise InvalidInputError(f"{path}: {exc}") from None
    return ds


def write_subjects_csv(path: str, ds: Dataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_SUBJECT_FIXED_COLS) + [f"x{j + 1}" for j in range(ds.p)])
        for i in range(ds.n):
            writer.writerow(
                [ds.ids[i], int(ds.a[i]), _fmt(ds.z[i]), int(ds.delta_m[i]),
                 _fmt(ds.y[i]), int(ds.delta_t[i])] + [_fmt(v) for v in ds.x[i]])


def write_truth_csv(path: str, ds: Dataset, truth: HiddenTruth) -> None:
    """Sidecar oracle file; the unobserved intermediate time is blank (with a
    flag set) for never-susceptible paths, never a numeric sentinel."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "u", "m_is_inf", "m_true", "t_true"])
        for i in range(ds.n):
            m_val = "" if truth.m_is_inf[i] else _fmt(truth.m_time[i])
            writer.writerow([ds.ids[i], int(truth.u[i]), int(truth.m_is_inf[i]),
                             m_val, _fmt(truth.t_time[i])])


def read_truth_csv(path: str) -> HiddenTruth:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    u = np.array([int(r["u"]) for r in rows])
    m_inf = np.array([bool(int(r["m_is_inf"])) for r in rows])
    m_time = np.array([float(r["m_true"]) if r["m_true"] else math.nan for r in rows])
    t_time = np.array([float(r["t_true"]) for r in rows])
    return HiddenTruth(u=u, m_is_inf=m_inf, m_time=m_time, t_time=t_time)


def write_json(path: str, payload: dict) -> None:
    payload = dict(payload)
    payload.setdefault("schema_version", SCHEMA_VERSION)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_fit_artifacts(out_dir: str, fit: FittedModel, ds: Dataset,
                        tol: float) -> None:
    """Emit fit.json, hazards.csv, posteriors.csv, and loglik_trace.csv."""
    params = fit.params
    write_json(os.path.join(out_dir, "fit.json"), {
        "params": {name: [float(v) for v in getattr(params, name)]
                   for name in ("eta_m1", "eta_r1", "eta_m2", "eta_r2",
                                "eta_t2", "eta_t3", "alpha1", "alpha2")},
        "p": params.p,
        "n": ds.n,
        "converged": bool(fit.converged),
        "n_iters": int(fit.n_iters),
        "final_loglik": float(fit.final_loglik),
        "n_clamp_events": int(fit.n_clamp_events),
        "tol": float(tol),
    })
    with open(os.path.join(out_dir, "hazards.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "time", "jump", "cumulated"])
        for h in fit.hazards:
            for t, j, c in zip(h.jump_times, h.jump_sizes, h.cumulative):
                writer.writerow([h.label, _fmt(t), _fmt(j), _fmt(c)])
    with open(os.path.join(out_dir, "posteriors.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "p_u1", "p_u2", "p_u3"])
        for i in range(ds.n):
            writer.writerow([ds.ids[i]] + [_fmt(v) for v in fit.posteriors.probs[i]])
    with open(os.path.join(out_dir, "loglik_trace.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loglik"])
        for k, v in enumerate(fit.loglik_trace):
            writer.writerow([k, _fmt(v)])


def read_fit_artifacts(fit_dir: str) -> FittedModel:
    """Reconstruct a FittedModel from the files written by the fit command."""
    with open(os.path.join(fit_dir, "fit.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    params = ParameterSet(**{k: np.array(v) for k, v in meta["params"].items()})

    by_label: dict[str, list[tuple[float, float]]] = {lab: [] for lab in HAZARD_LABELS}
    with open(os.path.join(fit_dir, "hazards.csv"), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            by_label[row["scale"]].append((float(row["time"]), float(row["jump"])))
    hazards = tuple(
        BaselineHazard(
            jump_times=[t for t, _ in by_label[lab]],
            jump_sizes=[j for _, j in by_label[lab]],
            label=lab,
        )
        for lab in HAZARD_LABELS
    )

    probs = []
    with open(os.path.join(fit_dir, "posteriors.csv"), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            probs.append([float(row["p_u1"]), float(row["p_u2"]), float(row["p_u3"])])
    trace = []
    with open(os.path.join(fit_dir, "loglik_trace.csv"), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            trace.append(float(row["loglik"]))

    return FittedModel(
        params=params, hazards=hazards,
        posteriors=PosteriorMatrix(probs=np.array(probs)),
        loglik_trace=np.array(trace), converged=bool(meta["converged"]),
        n_iters=int(meta["n_iters"]), n_clamp_events=int(meta["n_clamp_events"]),
    )


def write_effects_csv(path: str, rows: Sequence[dict]) -> None:
    """Long-format effect table: name, t, value, se, ci bounds, profile."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "t", "value", "se", "ci_low", "ci_high", "profile"])
        for r in rows:
            writer.writerow([r["name"], _fmt(r["t"]), _fmt(r["value"]),
                             _fmt(r.get("se")), _fmt(r.get("ci_low")),
                             _fmt(r.get("ci_high")), r.get("profile", "")])


def write_overlay_csv(path: str, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "t", "model_avg", "km"])
        for r in rows:
            writer.writerow([r["arm"], _fmt(r["t"]), _fmt(r["model_avg"]), _fmt(r["km"])])


def write_table_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def profile_string(x) -> str:
    return ";".join(f"x{j + 1}={_fmt(v)}" for j, v in enumerate(np.asarray(x).ravel()))
