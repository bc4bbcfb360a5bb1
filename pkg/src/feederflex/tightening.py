"""Iterative bound tightening: shrink the limits inside the scheduling model
until its schedule passes the exact AC check against the original limits.

The linear model is optimistic on voltage (losses ignored), so schedules that
look clean can still undervolt in reality; raising the model's voltage floor
(and shaving thermal ratings where overcurrent was seen) restores AC
feasibility at the cost of extra reductions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .acpf import detect_congestion, solve_ac_pf
from .contracts import Contract, Schedule
from .linearflow import BoundTightening
from .milp import SolveOptions, SolveResult, build_milp, solve_milp
from .network import Feeder
from .scenarios import ProfileSet, schedule_demand_pu

DEFAULT_DELTA_GRID = tuple(np.round(np.arange(0.0, 0.0325, 0.0025), 6))


@dataclass
class TighteningStep:
    """One grid point of the tightening trace."""

    delta: float
    milp_status: str
    objective: int | None
    ac_converged: bool
    ac_feasible: bool
    n_events: int
    worst_voltage_margin: float
    worst_thermal_margin: float
    schedule: Schedule | None = None  # kept in memory, not serialized

    def to_json(self) -> dict:
        return {
            "delta": self.delta,
            "milp_status": self.milp_status,
            "objective": self.objective,
            "ac_converged": self.ac_converged,
            "ac_feasible": self.ac_feasible,
            "n_events": self.n_events,
            "worst_voltage_margin": self.worst_voltage_margin,
            "worst_thermal_margin": self.worst_thermal_margin,
        }


@dataclass
class TighteningResult:
    """Outcome of the tightening loop.

    ``status`` is "feasible" when some grid point produced an AC-clean
    schedule (then ``delta_star``/``schedule`` are set) and "exhausted" when
    the grid ran out; the full per-delta trace is always carried.
    """

    status: str
    delta_star: float | None
    schedule: Schedule | None
    trace: list[TighteningStep] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "delta_star": self.delta_star,
            "trace": [s.to_json() for s in self.trace],
            "schedule": self.schedule.to_json() if self.schedule else None,
        }


def _assess(feeder, profiles, contracts, schedule):
    """AC-check a schedule against the original limits; report or None."""
    demand = schedule_demand_pu(feeder, profiles, contracts, schedule.s)
    sol = solve_ac_pf(feeder, demand)
    if not sol.converged:
        return None
    return detect_congestion(sol, feeder)


def tighten_and_resolve(
    feeder: Feeder,
    profiles: ProfileSet,
    contracts: list[Contract],
    delta_grid=DEFAULT_DELTA_GRID,
    solve_options: SolveOptions | None = None,
    k_gon: int = 8,
) -> TighteningResult:
    """Walk an ascending delta grid until the schedule is AC-clean.

    The first grid point must be 0. Which limit family receives the margin
    is decided by the violations observed on the delta=0 schedule: thermal
    ratings are scaled by (1 - delta) where overcurrent appeared, the
    voltage floor is raised by delta where undervoltage appeared, both when
    both. Schedules are always judged against the original limits. MILP
    infeasibility at a grid point is recorded and, since tightening only
    shrinks the feasible set, ends the walk as exhausted.
    """
    grid = [float(d) for d in delta_grid]
    if not grid or grid[0] != 0.0 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("delta grid must be ascending and start at 0")
    solve_options = solve_options or SolveOptions()

    trace: list[TighteningStep] = []
    tighten_voltage = tighten_thermal = False

    for i, delta in enumerate(grid):
        spec = BoundTightening(
            delta_v=delta if (i == 0 or tighten_voltage) else 0.0,
            delta_s=delta if (i == 0 or tighten_thermal) else 0.0,
        )
        model = build_milp(feeder, profiles, contracts, spec, k_gon=k_gon)
        res: SolveResult = solve_milp(model, solve_options)
        if res.status != "optimal":
            trace.append(
                TighteningStep(delta, res.status, None, False, False, -1, 0.0, 0.0)
            )
            if res.status == "infeasible":
                return TighteningResult("exhausted", None, None, trace)
            continue  # timeout: try the next grid point anyway

        report = _assess(feeder, profiles, contracts, res.schedule)
        if report is None:
            trace.append(
                TighteningStep(
                    delta, "optimal", res.objective, False, False, -1, 0.0, 0.0, res.schedule
                )
            )
        else:
            n_events = len(report.undervoltage) + len(report.overvoltage) + len(report.overcurrent)
            trace.append(
                TighteningStep(
                    delta,
                    "optimal",
                    res.objective,
                    True,
                    report.ok,
                    n_events,
                    report.worst_voltage_margin,
                    report.worst_thermal_margin,
                    res.schedule,
                )
            )
            if report.ok:
                return TighteningResult("feasible", delta, res.schedule, trace)
        if i == 0:
            # Lock in which limit family gets tightened on later passes.
            if report is not None:
                tighten_voltage = bool(report.undervoltage)
                tighten_thermal = bool(report.overcurrent)
            if not (tighten_voltage or tighten_thermal):
                # Overvoltage or divergence: tighten both as a fallback.
                tighten_voltage = tighten_thermal = True
    return TighteningResult("exhausted", None, None, trace)
