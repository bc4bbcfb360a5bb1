"""Command-line front end: scenario generation, single-feeder solves,
AC verification of schedules, cohort sweeps and report emission.

Exit codes: 0 on success, 2 when `solve` ends infeasible/timeout or `verify`
finds congestion, 1 on usage or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .acpf import detect_congestion, solve_ac_pf
from .contracts import PRESET_ORDER, Schedule, contracts_for, modality_by_name
from .harness import (
    SweepConfig,
    emit_report,
    load_scenario_params,
    load_sweep_config,
    run_sweep,
    save_scenario_params,
    save_sweep_config,
    table_from_metrics_csv,
)
from .linearflow import BoundTightening
from .milp import SolveOptions, build_milp, export_lp, solve_milp
from .network import load_feeder, save_feeder
from .scenarios import (
    ScenarioParams,
    generate_scenario,
    load_profiles,
    save_profiles,
    schedule_demand_pu,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="feederflex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic congested scenario")
    p_gen.add_argument("--config", help="scenario key=value file")
    p_gen.add_argument("--users", type=int, help="override user count")
    p_gen.add_argument("--seed", type=int, help="override seed")
    p_gen.add_argument("--out", required=True, help="output directory")

    p_solve = sub.add_parser("solve", help="schedule reductions on one feeder")
    p_solve.add_argument("--feeder", required=True)
    p_solve.add_argument("--profiles", required=True)
    p_solve.add_argument("--modality", default="simple", choices=PRESET_ORDER)
    p_solve.add_argument("--p-gtd-kw", type=float, default=2.5)
    p_solve.add_argument("--q-gtd-kvar", type=float, default=None)
    p_solve.add_argument("--delta", type=float, default=0.0,
                         help="bound tightening applied to both limit families")
    p_solve.add_argument("--step-minutes", type=int, default=15)
    p_solve.add_argument("--time-limit", type=float, default=None)
    p_solve.add_argument("--export-lp", help="write the model in LP text format")
    p_solve.add_argument("--out", help="write the schedule as JSON")
    p_solve.add_argument("--ac-check", action="store_true",
                         help="run the exact AC check on the resulting schedule")

    p_verify = sub.add_parser("verify", help="AC-check a schedule file")
    p_verify.add_argument("--feeder", required=True)
    p_verify.add_argument("--profiles", required=True)
    p_verify.add_argument("--schedule", required=True)
    p_verify.add_argument("--p-gtd-kw", type=float, default=2.5)
    p_verify.add_argument("--q-gtd-kvar", type=float, default=None)
    p_verify.add_argument("--step-minutes", type=int, default=15)
    p_verify.add_argument("--report", help="write the congestion report as JSON")

    p_sweep = sub.add_parser("sweep", help="run a feeder-cohort modality sweep")
    p_sweep.add_argument("--config", required=True, help="sweep key=value file")
    p_sweep.add_argument("--out", help="override the output directory")
    p_sweep.add_argument("--workers", type=int, help="override worker count")

    p_report = sub.add_parser("report", help="recompute reports from metrics.csv")
    p_report.add_argument("--in", dest="metrics", required=True)
    p_report.add_argument("--out", required=True)
    p_report.add_argument("--config", help="sweep config used for the run")
    return parser


def _cmd_gen(args) -> int:
    if args.config:
        params = load_scenario_params(args.config)
    else:
        params = ScenarioParams(n_users=args.users or 12, seed=args.seed or 1)
    if args.users is not None:
        params = replace(params, n_users=args.users)
    if args.seed is not None:
        params = replace(params, seed=args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feeder, profiles = generate_scenario(params)
    save_feeder(feeder, out / "feeder.json")
    save_profiles(profiles, out / "profiles.csv", feeder)
    save_scenario_params(params, out / "scenario.ini")
    print(f"wrote feeder.json, profiles.csv, scenario.ini to {out}")
    print(f"  users={params.n_users} horizon={params.horizon} seed={params.seed}")
    return 0


def _cmd_solve(args) -> int:
    feeder = load_feeder(args.feeder)
    profiles = load_profiles(args.profiles, feeder, step_minutes=args.step_minutes)
    preset = modality_by_name(args.modality, args.step_minutes)
    contracts = contracts_for(feeder, preset, args.p_gtd_kw, args.q_gtd_kvar)
    tighten = BoundTightening(delta_v=args.delta, delta_s=args.delta)

    model = build_milp(feeder, profiles, contracts, tighten)
    if args.export_lp:
        export_lp(model, args.export_lp)
        print(f"model exported to {args.export_lp} ({model.beta} binaries)")
    result = solve_milp(model, SolveOptions(time_limit=args.time_limit))
    print(f"status: {result.status}  nodes: {result.nodes}  wall: {result.wall_seconds:.2f}s")
    if result.status != "optimal":
        return 2
    schedule = result.schedule
    print(
        f"objective: {schedule.objective} reduction steps, "
        f"{len(schedule.participants)}/{len(schedule.users)} participants"
    )
    if args.out:
        Path(args.out).write_text(json.dumps(schedule.to_json(), indent=1))
        print(f"schedule written to {args.out}")
    if args.ac_check:
        sol = solve_ac_pf(feeder, schedule_demand_pu(feeder, profiles, contracts, schedule.s))
        if not sol.converged:
            print("AC check: power flow did not converge")
            return 2
        report = detect_congestion(sol, feeder)
        print(f"AC check: {'clean' if report.ok else 'congested'}")
        if not report.ok:
            return 2
    return 0


def _cmd_verify(args) -> int:
    feeder = load_feeder(args.feeder)
    profiles = load_profiles(args.profiles, feeder, step_minutes=args.step_minutes)
    schedule = Schedule.from_json(json.loads(Path(args.schedule).read_text()))
    preset = modality_by_name("simple", args.step_minutes)
    contracts = contracts_for(feeder, preset, args.p_gtd_kw, args.q_gtd_kvar)

    demand = schedule_demand_pu(feeder, profiles, contracts, schedule.s)
    sol = solve_ac_pf(feeder, demand)
    if not sol.converged:
        print(f"power flow did not converge (residual {sol.max_mismatch:.3e})")
        return 2
    report = detect_congestion(sol, feeder)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=1))
    n = len(report.undervoltage) + len(report.overvoltage) + len(report.overcurrent)
    print(f"congestion events: {n}")
    if not report.ok:
        print(
            f"worst voltage margin: {report.worst_voltage_margin:.4f} p.u., "
            f"worst thermal margin: {report.worst_thermal_margin:.4f} p.u."
        )
    return 0 if report.ok else 2


def _cmd_sweep(args) -> int:
    config = load_sweep_config(args.config)
    if args.out:
        config = replace(config, out_dir=args.out)
    if args.workers is not None:
        config = replace(config, workers=args.workers)
    table = run_sweep(config)
    paths = emit_report(table, config.out_dir)
    save_sweep_config(config, Path(config.out_dir) / "sweep_config.ini")
    print(f"{len(table.rows)} rows -> {paths['metrics']}")
    return 0


def _cmd_report(args) -> int:
    if args.config:
        config = load_sweep_config(args.config)
    else:
        # Infer modalities and grid from the metrics file itself.
        import csv as _csv

        with open(args.metrics, newline="") as fh:
            records = list(_csv.DictReader(fh))
        seen = {r["modality"] for r in records}
        modalities = tuple([m for m in PRESET_ORDER if m in seen] + sorted(seen - set(PRESET_ORDER)))
        stars = sorted({float(r["delta_star"]) for r in records if r.get("delta_star")})
        grid = tuple([0.0] + [d for d in stars if d > 0.0]) or (0.0,)
        config = SweepConfig(modalities=modalities, delta_grid=grid)
    table = table_from_metrics_csv(args.metrics, config)
    paths = emit_report(table, args.out)
    print(f"reports written to {args.out}: {', '.join(p.name for p in paths.values())}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "gen": _cmd_gen,
        "solve": _cmd_solve,
        "verify": _cmd_verify,
        "sweep": _cmd_sweep,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
