"""Serialization of trial and study outputs to plot-ready CSV/JSON files.

Every emission is deterministic: stable column order, no timestamps, floats
formatted with 13 significant digits (round-trips within 1e-12 relative),
and a manifest that hashes the resolved configuration and input files.
Histogram files stand in for density plots; any downstream tool can smooth
them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import feedersim
from feedersim.engine import CaseResult, EvStudyResult, RandomizationSummary, \
    TrialResult

FLOAT_FORMAT = "%.13g"
VOLTAGE_BIN_PU = 0.002


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return "nan"
        return FLOAT_FORMAT % value
    return str(value)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sha256_file(path) -> str | None:
    p = Path(path)
    if not p.is_file():
        return None
    return hashlib.sha256(p.read_bytes()).hexdigest()


@dataclass
class RunArtifacts:
    out_dir: Path
    manifest: dict
    files: list[Path]


def summarize_voltage_variation(trial: TrialResult) -> dict[str, tuple[float, float]]:
    """Per case: (mean per-node std dev, total range) of service voltages.

    The first metric averages each node's standard deviation over the hour;
    the second is the spread between the highest and lowest voltage seen at
    any node at any step.
    """
    out = {}
    for case in (trial.base, trial.regulation):
        if case is None:
            continue
        v = case.service_vmag
        if v.size == 0:
            out[case.label] = (0.0, 0.0)
            continue
        stds = []
        for j in range(v.shape[1]):
            col = v[:, j]
            col = col[~np.isnan(col)]
            if len(col):
                stds.append(float(col.std()))
        mean_std = float(np.mean(stds)) if stds else 0.0
        finite = v[~np.isnan(v)]
        total_range = float(finite.max() - finite.min()) if finite.size else 0.0
        out[case.label] = (mean_std, total_range)
    return out


def voltage_histogram(case: CaseResult,
                      bin_pu: float = VOLTAGE_BIN_PU) -> list[tuple[float, float, int]]:
    """(bin_left, bin_right, count) over all service channels and steps."""
    v = case.service_vmag
    finite = v[~np.isnan(v)] if v.size else np.array([])
    if finite.size == 0:
        return []
    idx = np.floor(finite / bin_pu).astype(int)
    out = []
    for k in range(idx.min(), idx.max() + 1):
        count = int(np.sum(idx == k))
        if count:
            out.append((k * bin_pu, (k + 1) * bin_pu, count))
    return out


def _case_columns(case: CaseResult | None, prefix: str, n_steps: int):
    cols = []
    if case is None:
        return cols
    cols.append((f"{prefix}_ac_kw", case.ac_power_kw))
    cols.append((f"{prefix}_head_kva", case.head_kva))
    if case.desired_kw is not None:
        cols.append((f"{prefix}_desired_kw", case.desired_kw))
        cols.append((f"{prefix}_u", case.command_u))
    return cols


def emit(trial: TrialResult, out_dir) -> RunArtifacts:
    """Write all artifact files for one trial; idempotent overwrite."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    n_steps = len(trial.base.times_s)
    columns = [("time_s", trial.base.times_s)]
    columns += _case_columns(trial.base, "base", n_steps)
    columns += _case_columns(trial.regulation, "regulation", n_steps)
    path = out / "series.csv"
    _write_csv(path, [name for name, _ in columns],
               zip(*[vals for _, vals in columns]))
    files.append(path)

    rows = []
    for case in (trial.base, trial.regulation):
        if case is None:
            continue
        for j, (bus, phase) in enumerate(case.service_keys):
            col = case.service_vmag[:, j]
            finite = col[~np.isnan(col)]
            if finite.size == 0:
                rows.append((case.label, bus, phase, math.nan, math.nan,
                             math.nan, math.nan))
            else:
                rows.append((case.label, bus, phase, float(finite.mean()),
                             float(finite.std()), float(finite.min()),
                             float(finite.max())))
    path = out / "voltage_summary.csv"
    _write_csv(path, ["case", "bus", "phase", "mean_pu", "std_pu", "min_pu",
                      "max_pu"], rows)
    files.append(path)

    reg = trial.regulation
    delta = trial.delta_faa_pct
    rows = []
    for i, xid in enumerate(trial.base.transformer_ids):
        rows.append((
            xid, trial.xfmr_rating_kva[i],
            trial.base.xfmr_mean_load_pu[i],
            reg.xfmr_mean_load_pu[i] if reg is not None else math.nan,
            trial.base.xfmr_mean_faa[i],
            reg.xfmr_mean_faa[i] if reg is not None else math.nan,
            delta[i] if delta is not None else math.nan,
            trial.xfmr_mean_duty[i],
            trial.base.xfmr_minutes_aged[i],
            reg.xfmr_minutes_aged[i] if reg is not None else math.nan))
    path = out / "transformers.csv"
    _write_csv(path, ["transformer_id", "rating_kva", "base_mean_load_pu",
                      "regulation_mean_load_pu", "base_mean_faa",
                      "regulation_mean_faa", "delta_faa_pct", "mean_duty_cycle",
                      "base_minutes_aged", "regulation_minutes_aged"], rows)
    files.append(path)

    rows = []
    for case in (trial.base, trial.regulation):
        if case is None:
            continue
        for r in case.violations.records:
            rows.append((case.label, r.component_id, r.kind, r.start_s,
                         r.end_s, r.worst))
    path = out / "violations.csv"
    _write_csv(path, ["case", "component_id", "kind", "start_s", "end_s",
                      "worst_value"], rows)
    files.append(path)

    rows = []
    for case in (trial.base, trial.regulation):
        if case is None:
            continue
        for e in case.events:
            rows.append((case.label, e["time_s"], e["kind"], e["component"],
                         e["detail"]))
    path = out / "events.csv"
    _write_csv(path, ["case", "time_s", "kind", "component", "detail"], rows)
    files.append(path)

    rows = []
    for case in (trial.base, trial.regulation):
        if case is None:
            continue
        for left, right, count in voltage_histogram(case):
            rows.append((case.label, left, right, count))
    path = out / "voltage_histogram.csv"
    _write_csv(path, ["case", "bin_left_pu", "bin_right_pu", "count"], rows)
    files.append(path)

    variation = summarize_voltage_variation(trial)
    manifest = {
        "run_id": hashlib.sha256(
            json.dumps([trial.config, trial.seed, trial.trial_index],
                       sort_keys=True).encode()).hexdigest()[:16],
        "seed": trial.seed,
        "trial_index": trial.trial_index,
        "config": trial.config,
        "versions": {
            "feedersim": feedersim.__version__,
            "numpy": np.__version__,
        },
        "inputs_sha256": {
            key: _sha256_file(trial.config.get(key))
            for key in ("feeder", "weather", "regulation_signal")
            if trial.config.get(key) not in (None, "None")
        },
        "baseline_kw": trial.baseline_kw,
        "cases": {
            case.label: {
                "energy_kwh": case.energy_kwh,
                "violations": len(case.violations),
                "dispatch_commands": case.dispatch_commands,
                "tracking_error_rms_kw": case.tracking_error_rms_kw(),
                "voltage_mean_std_pu": variation[case.label][0],
                "voltage_total_range_pu": variation[case.label][1],
            }
            for case in (trial.base, trial.regulation) if case is not None
        },
    }
    path = out / "manifest.json"
    _write_json(path, manifest)
    files.append(path)
    return RunArtifacts(out_dir=out, manifest=manifest, files=files)


def emit_ev_study(result: EvStudyResult, out_dir) -> RunArtifacts:
    """Study table plus full artifacts for each EV trial in a subdirectory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    rows = []
    for name in ("ev_plus", "no_ev", "ev_minus"):
        row = result.overlimit_pct[name]
        rows.append((name, row.get("base_any", math.nan),
                     row.get("regulation_any", math.nan),
                     row.get("base_sustained", math.nan),
                     row.get("regulation_sustained", math.nan),
                     result.sensitivity[name]))
    path = out / "overlimit_table.csv"
    _write_csv(path, ["scenario", "base_any_pct", "regulation_any_pct",
                      "base_sustained_pct", "regulation_sustained_pct",
                      "mean_voltage_sensitivity_pu_per_pu"], rows)
    files.append(path)
    manifest = {"study": "ev", "scenarios": {}}
    for name, trial in result.trials.items():
        sub = emit(trial, out / name)
        files.extend(sub.files)
        manifest["scenarios"][name] = sub.manifest
    path = out / "study.json"
    _write_json(path, manifest)
    files.append(path)
    return RunArtifacts(out_dir=out, manifest=manifest, files=files)


def emit_randomization(summary: RandomizationSummary, out_dir) -> RunArtifacts:
    """Aging-count distribution, per-transformer stats, and trial artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    rows = [(xid, int(summary.increase_counts[i]), summary.delta_faa_pct[i],
             summary.mean_duty[i])
            for i, xid in enumerate(summary.transformer_ids)]
    path = out / "aging_counts.csv"
    _write_csv(path, ["transformer_id", "trials_with_increase",
                      "delta_faa_pct_mean", "mean_duty_cycle"], rows)
    files.append(path)

    rows = [(k, summary.observed[k], summary.expected[k])
            for k in range(len(summary.observed))]
    path = out / "aging_distribution.csv"
    _write_csv(path, ["trials_with_increase", "observed_transformers",
                      "expected_binomial"], rows)
    files.append(path)

    manifest = {
        "study": "randomization",
        "n_trials": summary.n_trials,
        "p_hat": summary.p_hat,
        "duty_cycle_correlation": summary.correlation,
        "chi_square": summary.chi_square,
        "chi_square_critical_95": summary.chi_square_critical,
    }
    path = out / "randomization.json"
    _write_json(path, manifest)
    files.append(path)

    for trial in summary.trials:
        sub = emit(trial, out / f"trial_{trial.trial_index:02d}")
        files.extend(sub.files)
    return RunArtifacts(out_dir=out, manifest=manifest, files=files)
