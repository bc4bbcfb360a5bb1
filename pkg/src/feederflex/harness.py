"""Cohort sweeps: generate feeders, solve every modality, AC-verify with
tightening, aggregate the results into flat report files.

Outputs are deterministic for a fixed config regardless of worker count:
cells are pure functions of (config, feeder seed, modality) and rows are
sorted before writing. Wall-clock timings go to a separate ``timings.csv``
so ``metrics.csv`` stays byte-identical across runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .contracts import PRESET_ORDER, contracts_for, modality_by_name
from .milp import SolveOptions
from .scenarios import ScenarioParams, generate_scenario
from .tightening import DEFAULT_DELTA_GRID, tighten_and_resolve

WORKERS_ENV = "FEEDERFLEX_WORKERS"


@dataclass
class SweepConfig:
    """Cohort description: feeder count/sizes, modalities, tightening grid."""

    n_feeders: int = 20
    users_min: int = 8
    users_max: int = 16
    seed0: int = 1
    horizon: int = 96
    step_minutes: int = 15
    ev_share: float = 0.30
    ev_power_kva: float = 3.3
    three_phase_share: float = 0.25
    p_gtd_kw: float = 2.5
    peak_kw_min: float = 1.0
    peak_kw_max: float = 2.4
    vmin_pu: float = 0.9
    vmax_pu: float = 1.1
    congestion_depth: float = 0.10
    modalities: tuple[str, ...] = PRESET_ORDER
    delta_grid: tuple[float, ...] = DEFAULT_DELTA_GRID
    time_limit: float = 60.0
    k_gon: int = 8
    out_dir: str = "sweep_out"
    workers: int | None = None

    def validate(self) -> None:
        if self.n_feeders < 1:
            raise ValueError("n_feeders must be >= 1")
        if not self.modalities:
            raise ValueError("modality list must be nonempty")
        if self.users_min < 1 or self.users_max < self.users_min:
            raise ValueError("invalid user count range")
        for name in self.modalities:
            modality_by_name(name, self.step_minutes)  # raises on unknown names

    def config_hash(self) -> str:
        payload = "\n".join(
            f"{f.name}={getattr(self, f.name)}"
            for f in fields(self)
            if f.name not in ("out_dir", "workers")
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def feeder_sizes(self) -> list[int]:
        return [
            int(round(v))
            for v in np.linspace(self.users_min, self.users_max, self.n_feeders)
        ]

    def scenario_params(self, i: int) -> ScenarioParams:
        return ScenarioParams(
            n_users=self.feeder_sizes()[i],
            seed=self.seed0 + i,
            horizon=self.horizon,
            step_minutes=self.step_minutes,
            ev_share=self.ev_share,
            ev_power_kva=self.ev_power_kva,
            three_phase_share=self.three_phase_share,
            p_gtd_kw=self.p_gtd_kw,
            peak_kw_min=self.peak_kw_min,
            peak_kw_max=self.peak_kw_max,
            vmin_pu=self.vmin_pu,
            vmax_pu=self.vmax_pu,
            congestion_depth=self.congestion_depth,
        )


METRICS_COLUMNS = [
    "feeder_id",
    "n_users",
    "modality",
    "config_hash",
    "milp_status",
    "objective",
    "participants",
    "participant_fraction",
    "reduction_min_per_participant",
    "delta_star",
    "tighten_status",
    "ac_feasible_at_0",
    "note",
]


@dataclass
class MetricsRow:
    feeder_id: str
    n_users: int
    modality: str
    config_hash: str
    milp_status: str = ""
    objective: int | None = None
    participants: int | None = None
    participant_fraction: float | None = None
    reduction_min_per_participant: float | None = None
    delta_star: float | None = None
    tighten_status: str = ""
    ac_feasible_at_0: bool | None = None
    note: str = ""
    cell_seconds: float = 0.0  # reported in timings.csv, not metrics.csv

    def metrics_values(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, float):
                return format(v, ".10g")
            return str(v)

        return [fmt(getattr(self, c)) for c in METRICS_COLUMNS]


@dataclass
class MetricsTable:
    rows: list[MetricsRow]
    config: SweepConfig

    def sorted_rows(self) -> list[MetricsRow]:
        mod_rank = {m: i for i, m in enumerate(self.config.modalities)}
        return sorted(self.rows, key=lambda r: (r.feeder_id, mod_rank.get(r.modality, 99)))


def _run_cell(config: SweepConfig, i: int, modality: str) -> MetricsRow:
    """One (feeder, modality) cell; never raises, failures become row notes."""
    import time

    params = config.scenario_params(i)
    row = MetricsRow(
        feeder_id=f"f{params.seed:04d}",
        n_users=params.n_users,
        modality=modality,
        config_hash=config.config_hash(),
    )
    t0 = time.monotonic()
    try:
        feeder, profiles = generate_scenario(params)
        preset = modality_by_name(modality, config.step_minutes)
        contracts = contracts_for(feeder, preset, config.p_gtd_kw)
        result = tighten_and_resolve(
            feeder,
            profiles,
            contracts,
            delta_grid=config.delta_grid,
            solve_options=SolveOptions(time_limit=config.time_limit),
            k_gon=config.k_gon,
        )
        first = result.trace[0] if result.trace else None
        row.milp_status = first.milp_status if first else "error"
        row.ac_feasible_at_0 = first.ac_feasible if first and first.milp_status == "optimal" else None
        row.tighten_status = result.status
        row.delta_star = result.delta_star

        schedule = result.schedule
        if schedule is None and first is not None and first.schedule is not None:
            schedule = first.schedule
        if schedule is not None:
            participants = schedule.participants
            row.objective = schedule.objective
            row.participants = len(participants)
            row.participant_fraction = len(participants) / params.n_users
            row.reduction_min_per_participant = (
                config.step_minutes * schedule.objective / len(participants)
                if participants
                else 0.0
            )
    except Exception as exc:  # failures are data, not crashes
        row.milp_status = "error"
        row.note = f"{type(exc).__name__}: {exc}"
    row.cell_seconds = time.monotonic() - t0
    return row


def _resolve_workers(config: SweepConfig) -> int:
    if config.workers is not None:
        return max(1, config.workers)
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


def _load_existing(out_dir: Path) -> dict[tuple[str, str, str], dict]:
    path = out_dir / "metrics.csv"
    if not path.exists():
        return {}
    existing = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            existing[(rec["feeder_id"], rec["modality"], rec["config_hash"])] = rec
    return existing


def _row_from_record(rec: dict) -> MetricsRow:
    def opt_int(v):
        return int(v) if v not in ("", None) else None

    def opt_float(v):
        return float(v) if v not in ("", None) else None

    def opt_bool(v):
        return None if v in ("", None) else v == "true"

    return MetricsRow(
        feeder_id=rec["feeder_id"],
        n_users=int(rec["n_users"]),
        modality=rec["modality"],
        config_hash=rec["config_hash"],
        milp_status=rec.get("milp_status", ""),
        objective=opt_int(rec.get("objective")),
        participants=opt_int(rec.get("participants")),
        participant_fraction=opt_float(rec.get("participant_fraction")),
        reduction_min_per_participant=opt_float(rec.get("reduction_min_per_participant")),
        delta_star=opt_float(rec.get("delta_star")),
        tighten_status=rec.get("tighten_status", ""),
        ac_feasible_at_0=opt_bool(rec.get("ac_feasible_at_0")),
        note=rec.get("note", ""),
    )


def run_sweep(config: SweepConfig) -> MetricsTable:
    """Execute every (feeder, modality) cell, reusing rows already present in
    the output directory for the same config hash."""
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config.config_hash()
    existing = _load_existing(out_dir)

    tasks = []
    reused: list[MetricsRow] = []
    for i in range(config.n_feeders):
        fid = f"f{config.seed0 + i:04d}"
        for modality in config.modalities:
            key = (fid, modality, chash)
            if key in existing:
                reused.append(_row_from_record(existing[key]))
            else:
                tasks.append((i, modality))

    n_workers = _resolve_workers(config)
    rows: list[MetricsRow] = list(reused)
    if tasks:
        if n_workers == 1:
            for i, modality in tasks:
                rows.append(_run_cell(config, i, modality))
        else:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                futures = [pool.submit(_run_cell, config, i, m) for i, m in tasks]
                rows.extend(f.result() for f in futures)
    return MetricsTable(rows=rows, config=config)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def _quartiles(values: list[float]) -> dict:
    if not values:
        return {"p25": None, "p50": None, "p75": None}
    q = np.percentile(np.asarray(values, dtype=float), [25, 50, 75])
    return {"p25": float(q[0]), "p50": float(q[1]), "p75": float(q[2])}


def summarize(table: MetricsTable) -> dict:
    """Per-modality aggregates, a pure function of the metrics rows."""
    out: dict = {"config_hash": table.config.config_hash(), "modalities": {}}
    for modality in table.config.modalities:
        rows = [r for r in table.rows if r.modality == modality]
        if not rows:
            continue
        n = len(rows)
        feas = [r for r in rows if r.milp_status == "optimal"]
        ac_ok = [r for r in rows if r.tighten_status == "feasible"]
        red = [
            r.reduction_min_per_participant
            for r in feas
            if r.reduction_min_per_participant is not None and (r.participants or 0) > 0
        ]
        pf = [r.participant_fraction for r in feas if r.participant_fraction is not None]
        dstar = [r.delta_star for r in ac_ok if r.delta_star is not None]
        out["modalities"][modality] = {
            "n": n,
            "milp_feasible_pct": 100.0 * len(feas) / n,
            "ac_feasible_pct": 100.0 * len(ac_ok) / n,
            "reduction_min_per_participant": _quartiles(red),
            "participant_fraction_mean": float(np.mean(pf)) if pf else None,
            "delta_star_max": max(dstar) if dstar else None,
        }
    return out


def tightening_curve(table: MetricsTable) -> list[tuple[str, float, float]]:
    """Cumulative share of feeders AC-feasible at or below each grid delta."""
    curve = []
    for modality in table.config.modalities:
        rows = [r for r in table.rows if r.modality == modality]
        if not rows:
            continue
        stars = [r.delta_star for r in rows if r.delta_star is not None]
        for delta in table.config.delta_grid:
            pct = 100.0 * sum(1 for d in stars if d <= delta + 1e-12) / len(rows)
            curve.append((modality, float(delta), pct))
    return curve


def emit_report(table: MetricsTable, out_dir) -> dict[str, Path]:
    """Write metrics.csv, timings.csv, summary.json and tightening_curve.csv.

    metrics.csv carries only run-independent values; re-running the same
    config reproduces it byte for byte.
    """
    if not table.rows:
        raise ValueError("empty metrics table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in table.sorted_rows():
            writer.writerow(row.metrics_values())
    paths["metrics"] = metrics_path

    timings_path = out_dir / "timings.csv"
    with open(timings_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feeder_id", "modality", "cell_seconds"])
        for row in table.sorted_rows():
            writer.writerow([row.feeder_id, row.modality, format(row.cell_seconds, ".3f")])
    paths["timings"] = timings_path

    summary = summarize(table)
    timing_by_modality: dict[str, list[float]] = {}
    for row in table.rows:
        timing_by_modality.setdefault(row.modality, []).append(row.cell_seconds)
    summary["timing"] = {
        m: {"mean_s": float(np.mean(v)), "max_s": float(np.max(v))}
        for m, v in sorted(timing_by_modality.items())
    }
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    paths["summary"] = summary_path

    curve_path = out_dir / "tightening_curve.csv"
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["modality", "delta", "cumulative_feasible_pct"])
        for modality, delta, pct in tightening_curve(table):
            writer.writerow([modality, format(delta, ".10g"), format(pct, ".10g")])
    paths["curve"] = curve_path
    return paths


def table_from_metrics_csv(path, config: SweepConfig) -> MetricsTable:
    """Rebuild a MetricsTable from a previously written metrics.csv."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(_row_from_record(rec))
    return MetricsTable(rows=rows, config=config)


# ---------------------------------------------------------------------------
# Flat key=value config files
# ---------------------------------------------------------------------------

def _parse_value(field_type: str, raw: str):
    raw = raw.strip()
    if field_type == "int":
        return int(raw)
    if field_type == "float":
        return float(raw)
    if field_type == "tuple_str":
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if field_type == "tuple_float":
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if field_type == "opt_int":
        return None if raw.lower() in ("", "none", "auto") else int(raw)
    return raw


_SWEEP_FIELD_TYPES = {
    "n_feeders": "int",
    "users_min": "int",
    "users_max": "int",
    "seed0": "int",
    "horizon": "int",
    "step_minutes": "int",
    "ev_share": "float",
    "ev_power_kva": "float",
    "three_phase_share": "float",
    "p_gtd_kw": "float",
    "peak_kw_min": "float",
    "peak_kw_max": "float",
    "vmin_pu": "float",
    "vmax_pu": "float",
    "congestion_depth": "float",
    "modalities": "tuple_str",
    "delta_grid": "tuple_float",
    "time_limit": "float",
    "k_gon": "int",
    "out_dir": "str",
    "workers": "opt_int",
}


def load_sweep_config(path) -> SweepConfig:
    """Read a flat ``key = value`` file (comments with '#')."""
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _SWEEP_FIELD_TYPES:
            raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
        values[key] = _parse_value(_SWEEP_FIELD_TYPES[key], raw)
    return SweepConfig(**values)


def save_sweep_config(config: SweepConfig, path) -> None:
    lines = []
    for key in _SWEEP_FIELD_TYPES:
        val = getattr(config, key)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    Path(path).write_text("\n".join(lines) + "\n")


_SCENARIO_FIELD_TYPES = {
    "n_users": "int",
    "seed": "int",
    "horizon": "int",
    "step_minutes": "int",
    "ev_share": "float",
    "ev_power_kva": "float",
    "ev_phase_policy": "str",
    "three_phase_share": "float",
    "users_per_junction": "int",
    "p_gtd_kw": "float",
    "power_factor": "float",
    "peak_kw_min": "float",
    "peak_kw_max": "float",
    "vmin_pu": "float",
    "vmax_pu": "float",
    "ensure_congested": "bool",
    "congestion_depth": "float",
    "base_voltage_v": "float",
    "base_power_va": "float",
}


def load_scenario_params(path) -> ScenarioParams:
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _SCENARIO_FIELD_TYPES:
            raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
        kind = _SCENARIO_FIELD_TYPES[key]
        if kind == "bool":
            values[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            values[key] = _parse_value(kind, raw)
    return ScenarioParams(**values)


def save_scenario_params(params: ScenarioParams, path) -> None:
    lines = []
    for key in _SCENARIO_FIELD_TYPES:
        lines.append(f"{key} = {getattr(params, key)}")
    Path(path).write_text("\n".join(lines) + "\n")
