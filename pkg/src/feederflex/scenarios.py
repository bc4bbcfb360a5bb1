"""Synthetic feeders, demand profiles and EV fleets for congestion studies.

Feeders are built as a three-phase trunk with per-user service drops, then
calibrated so that the state with every user capped at the guaranteed
threshold is comfortably inside all limits while the forecast (after EV
attachment and baseline rescaling) violates at least one limit. Everything
is a pure function of the scenario parameters and seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .acpf import detect_congestion, solve_ac_pf
from .contracts import Contract
from .network import (
    Branch,
    Bus,
    Feeder,
    PHASES,
    PHASE_INDEX,
    UserAttachment,
    default_q_from_p,
    feeder_index,
    per_unit_convert,
    validate_feeder,
)

# Cable constants (ohm/km): trunk = 4x150 Al main cable, drop = 2x25 Cu
# service connection. Mutual terms model shared-duct reactive coupling.
_TRUNK_R = 0.206
_TRUNK_X = 0.078
_TRUNK_XM = 0.045
_DROP_R = 0.727
_DROP_X = 0.085


@dataclass
class ScenarioParams:
    """Knobs of the synthetic case-study generator."""

    n_users: int
    seed: int = 0
    horizon: int = 96
    step_minutes: int = 15
    ev_share: float = 0.30
    ev_power_kva: float = 3.3
    ev_phase_policy: str = "attachment"
    three_phase_share: float = 0.25
    users_per_junction: int = 2
    p_gtd_kw: float = 2.5
    power_factor: float = 0.95
    peak_kw_min: float = 1.0
    peak_kw_max: float = 2.4
    vmin_pu: float = 0.9
    vmax_pu: float = 1.1
    ensure_congested: bool = True
    congestion_depth: float = 0.10
    base_voltage_v: float = 230.0
    base_power_va: float = 10_000.0
    # Loading of the all-reduced state relative to the limits; None draws a
    # per-seed value, which mixes thermal- and voltage-driven congestion
    # across a cohort.
    thermal_anchor: float | None = None
    voltage_anchor: float | None = None

    def validate(self) -> None:
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")
        if not (0.0 <= self.ev_share <= 1.0):
            raise ValueError("ev_share must lie in [0, 1]")
        if self.horizon < 1 or self.step_minutes < 1:
            raise ValueError("horizon and step_minutes must be positive")
        if self.horizon * self.step_minutes > 24 * 60:
            raise ValueError("day-ahead horizon cannot exceed 24 h")
        if self.ev_phase_policy != "attachment":
            raise ValueError("unknown ev_phase_policy (supported: 'attachment')")
        if not (0.0 < self.power_factor <= 1.0):
            raise ValueError("power_factor must lie in (0, 1]")
        if self.peak_kw_min < 0 or self.peak_kw_max < self.peak_kw_min:
            raise ValueError("invalid baseline peak band")
        if self.thermal_anchor is not None and not (0.0 < self.thermal_anchor < 1.0):
            raise ValueError("thermal_anchor must lie in (0, 1)")
        if self.voltage_anchor is not None and not (self.vmin_pu < self.voltage_anchor < 1.0):
            raise ValueError("voltage_anchor must lie between vmin_pu and 1")
        if self.vmin_pu <= 0 or self.vmax_pu <= self.vmin_pu:
            raise ValueError("invalid voltage band")


@dataclass
class ProfileSet:
    """Forecasted per-user, per-phase demand trajectories (kW / kvar).

    Arrays are (n_users, 3, horizon) with zeros on phases a user is not
    attached to; the user axis is sorted by user id. Values may be negative
    (net PV export).
    """

    users: tuple[str, ...]
    horizon: int
    step_minutes: int
    p_fx: np.ndarray
    q_fx: np.ndarray

    def __post_init__(self):
        expected = (len(self.users), 3, self.horizon)
        if self.p_fx.shape != expected or self.q_fx.shape != expected:
            raise ValueError(f"profile arrays must have shape {expected}")
        if self.step_minutes <= 0:
            raise ValueError("step_minutes must be positive")

    def copy(self) -> "ProfileSet":
        return ProfileSet(self.users, self.horizon, self.step_minutes, self.p_fx.copy(), self.q_fx.copy())


# ---------------------------------------------------------------------------
# Feeder synthesis
# ---------------------------------------------------------------------------

def generate_feeder(params: ScenarioParams) -> Feeder:
    """Radial trunk-and-drop feeder with calibrated limits.

    Ratings and impedances are anchored on the all-users-reduced state: that
    state ends up at ~62% of the trunk thermal ratings and above 0.95 p.u.
    everywhere, so a reduction schedule covering every user is always a way
    out of congestion.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    n = params.n_users
    n_junction = math.ceil(n / params.users_per_junction)

    buses = [Bus(id="src", phases=("a", "b", "c"), vmin_pu=params.vmin_pu,
                 vmax_pu=params.vmax_pu, is_source=True)]
    z_ohm: dict[tuple[str, str], np.ndarray] = {}
    s_kva: dict[tuple[str, str], float] = {}
    branches: list[Branch] = []

    prev = "src"
    for j in range(n_junction):
        jid = f"j{j + 1:03d}"
        buses.append(Bus(id=jid, phases=("a", "b", "c"), vmin_pu=params.vmin_pu, vmax_pu=params.vmax_pu))
        span_km = rng.uniform(0.025, 0.045)
        z = (np.full((3, 3), _TRUNK_XM * 1j) + np.diag([_TRUNK_R + 1j * (_TRUNK_X - _TRUNK_XM)] * 3)) * span_km
        key = (prev, jid)
        z_ohm[key] = z
        s_kva[key] = 1.0  # provisional, replaced by the anchoring pass
        branches.append(Branch(prev, jid, ("a", "b", "c"), np.eye(3, dtype=complex), 1.0))
        prev = jid

    # Users: three-phase share first in a shuffled order, single-phase users
    # rotate across a/b/c for rough balance.
    order = rng.permutation(n)
    n_three = int(round(params.three_phase_share * n))
    is_three = np.zeros(n, dtype=bool)
    is_three[order[:n_three]] = True
    users: list[UserAttachment] = []
    phase_cycle = 0
    for k in range(n):
        uid = f"u{k + 1:03d}"
        bid = f"h{k + 1:03d}"
        junction = f"j{(k % n_junction) + 1:03d}"
        if is_three[k]:
            phases: tuple[str, ...] = ("a", "b", "c")
        else:
            phases = (PHASES[phase_cycle % 3],)
            phase_cycle += 1
        buses.append(Bus(id=bid, phases=phases, vmin_pu=params.vmin_pu, vmax_pu=params.vmax_pu))
        span_km = rng.uniform(0.008, 0.030)
        m = len(phases)
        z = np.diag([(_DROP_R + 1j * _DROP_X)] * m) * span_km
        key = (junction, bid)
        z_ohm[key] = z
        s_kva[key] = 1.0
        branches.append(Branch(junction, bid, phases, np.eye(m, dtype=complex), 1.0))
        users.append(UserAttachment(user_id=uid, bus_id=bid, phases=phases))

    feeder = Feeder(
        buses=tuple(buses),
        branches=tuple(branches),
        users=tuple(users),
        base_voltage_v=params.base_voltage_v,
        base_power_va=params.base_power_va,
    )
    feeder = per_unit_convert(feeder, z_ohm, s_kva)

    # Which limit family the scaled forecast hits first: tight voltage
    # anchors make undervoltage bind before the trunk ratings and vice
    # versa. Cohorts get a mix unless anchors are pinned explicitly.
    mode = rng.random()
    if mode < 0.45:  # voltage-driven congestion
        v_draw = float(rng.uniform(0.934, 0.948))
        t_draw = float(rng.uniform(0.52, 0.62))
    elif mode < 0.80:  # thermal-driven
        v_draw = float(rng.uniform(0.958, 0.972))
        t_draw = float(rng.uniform(0.48, 0.64))
    else:  # contested
        v_draw = float(rng.uniform(0.940, 0.952))
        t_draw = float(rng.uniform(0.48, 0.56))
    thermal_anchor = params.thermal_anchor if params.thermal_anchor is not None else t_draw
    voltage_anchor = params.voltage_anchor if params.voltage_anchor is not None else v_draw

    # Scale impedances until the all-reduced state sits at the voltage anchor.
    contracts = [Contract(u.user_id, params.p_gtd_kw) for u in feeder.sorted_users()]
    for _ in range(4):
        sol = solve_ac_pf(feeder, gtd_demand_pu(feeder, contracts))
        vmin = float(np.nanmin(np.abs(sol.v)))
        if not sol.converged or vmin < 0.5:
            raise RuntimeError("all-reduced anchor state did not converge")
        if abs(vmin - voltage_anchor) <= 0.003:
            break
        factor = (1.0 - voltage_anchor) / max(1.0 - vmin, 1e-9)
        z_ohm = {k: v * factor for k, v in z_ohm.items()}
        feeder = per_unit_convert(feeder, z_ohm, s_kva)

    # Anchor ratings: trunk loaded to the thermal anchor under the
    # all-reduced state, service drops sized generously so congestion
    # concentrates on the shared trunk.
    sol = solve_ac_pf(feeder, gtd_demand_pu(feeder, contracts))
    fx = feeder_index(feeder)
    smag = np.abs(sol.s_flow)[:, :, 0]
    q_gtd = default_q_from_p(params.p_gtd_kw, params.power_factor)
    drop_kva = (
        math.hypot(params.p_gtd_kw, q_gtd)
        + params.ev_power_kva
        + params.peak_kw_max / params.power_factor
    ) * 1.4
    for k in range(fx.n_branch):
        br = fx.branches[k]
        flow_kva = smag[k].max() * params.base_power_va / 1000.0
        if br.to_bus.startswith("j"):
            s_kva[br.key] = max(flow_kva / thermal_anchor, 1.0)
        else:
            s_kva[br.key] = max(drop_kva, flow_kva / thermal_anchor)
    feeder = per_unit_convert(feeder, z_ohm, s_kva)

    report = validate_feeder(feeder)
    if not report.ok:
        raise RuntimeError(f"generator produced an invalid feeder: {report.problems}")
    return feeder


# ---------------------------------------------------------------------------
# Demand profiles
# ---------------------------------------------------------------------------

def generate_baseline_profiles(feeder: Feeder, params: ScenarioParams) -> ProfileSet:
    """Smooth household curves with morning/evening peaks.

    Each user's daily peak is drawn from [peak_kw_min, peak_kw_max] and the
    curve rescaled to hit it exactly; reactive power follows the configured
    power factor.
    """
    params.validate()
    rng = np.random.default_rng(params.seed + 1)
    attachments = feeder.sorted_users()
    T = params.horizon
    hours = (np.arange(T) + 0.5) * params.step_minutes / 60.0

    p = np.zeros((len(attachments), 3, T))
    for k, att in enumerate(attachments):
        base = rng.uniform(0.12, 0.30)
        m_amp, m_c, m_w = rng.uniform(0.4, 1.0), rng.normal(7.5, 0.5), rng.uniform(1.0, 1.8)
        e_amp, e_c, e_w = rng.uniform(0.9, 2.0), rng.normal(18.5, 0.7), rng.uniform(1.5, 2.5)
        curve = (
            base
            + m_amp * np.exp(-0.5 * ((hours - m_c) / m_w) ** 2)
            + e_amp * np.exp(-0.5 * ((hours - e_c) / e_w) ** 2)
        )
        target_peak = rng.uniform(params.peak_kw_min, params.peak_kw_max)
        curve = curve * (target_peak / curve.max()) if target_peak > 0 else np.zeros(T)
        if len(att.phases) == 1:
            weights = {att.phases[0]: 1.0}
        else:
            w = rng.uniform(0.8, 1.2, size=len(att.phases))
            w = w / w.sum()
            weights = dict(zip(att.phases, w))
        for ph, w in weights.items():
            p[k, PHASE_INDEX[ph]] = curve * w
    q = p * math.tan(math.acos(params.power_factor))
    return ProfileSet(
        users=tuple(a.user_id for a in attachments),
        horizon=T,
        step_minutes=params.step_minutes,
        p_fx=p,
        q_fx=q,
    )


def attach_ev_sessions(profiles: ProfileSet, feeder: Feeder, params: ScenarioParams) -> ProfileSet:
    """Add constant-power charging blocks to a share of users.

    Session starts follow an evening-weighted mixture (80% around 18:00,
    20% around 13:00), durations are uniform on 2-6 h, and the charger sits
    on the user's attachment phase (random phase for three-phase users).
    Demand never decreases; with ev_share = 0 the input is returned as is.
    """
    params.validate()
    if params.ev_share == 0.0:
        return profiles.copy()
    rng = np.random.default_rng(params.seed + 2)
    attachments = feeder.sorted_users()
    if tuple(a.user_id for a in attachments) != profiles.users:
        raise ValueError("profiles are not aligned with the feeder user set")

    n = len(attachments)
    n_ev = int(round(params.ev_share * n))
    chosen = np.sort(rng.permutation(n)[:n_ev])
    out = profiles.copy()
    T, step = profiles.horizon, profiles.step_minutes
    p_ev = params.ev_power_kva * params.power_factor
    q_ev = default_q_from_p(p_ev, params.power_factor)

    for k in chosen:
        att = attachments[k]
        if rng.random() < 0.8:
            start_h = rng.normal(18.0, 1.5)
        else:
            start_h = rng.normal(13.0, 2.0)
        dur_h = rng.uniform(2.0, 6.0)
        start = int(np.clip(round(start_h * 60.0 / step), 0, T - 1))
        length = max(1, int(round(dur_h * 60.0 / step)))
        stop = min(T, start + length)
        if len(att.phases) == 1:
            ph = att.phases[0]
        else:
            ph = att.phases[int(rng.integers(len(att.phases)))]
        out.p_fx[k, PHASE_INDEX[ph], start:stop] += p_ev
        out.q_fx[k, PHASE_INDEX[ph], start:stop] += q_ev
    return out


def generate_scenario(params: ScenarioParams) -> tuple[Feeder, ProfileSet]:
    """Feeder plus forecast satisfying the congestion target.

    The baseline amplitude is rescaled (binary search) until the forecast
    violates at least one limit under exact AC power flow while the
    all-reduced state stays clean; EV blocks are left untouched.
    """
    feeder = generate_feeder(params)
    baseline = generate_baseline_profiles(feeder, params)
    with_ev = attach_ev_sessions(baseline, feeder, params)
    if not params.ensure_congested:
        return feeder, with_ev

    ev_p = with_ev.p_fx - baseline.p_fx
    ev_q = with_ev.q_fx - baseline.q_fx

    def congested(scale: float) -> bool:
        trial = replace(
            baseline, p_fx=baseline.p_fx * scale + ev_p, q_fx=baseline.q_fx * scale + ev_q
        )
        sol = solve_ac_pf(feeder, forecast_demand_pu(feeder, trial))
        if not sol.converged:
            return True  # beyond collapse: certainly outside limits
        return not detect_congestion(sol, feeder).ok

    lo, hi = 0.0, 1.0
    while not congested(hi):
        lo, hi = hi, hi * 2.0
        if hi > 64.0:
            raise RuntimeError("could not induce congestion by baseline scaling")
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if congested(mid):
            hi = mid
        else:
            lo = mid
    scale = max(hi * (1.0 + params.congestion_depth), 0.35)

    profiles = replace(
        baseline, p_fx=baseline.p_fx * scale + ev_p, q_fx=baseline.q_fx * scale + ev_q
    )
    sol = solve_ac_pf(feeder, forecast_demand_pu(feeder, profiles))
    if sol.converged and detect_congestion(sol, feeder).ok:
        raise RuntimeError("congestion target missed after rescaling")
    return feeder, profiles


# ---------------------------------------------------------------------------
# Demand conversions (kW <-> p.u., users <-> buses)
# ---------------------------------------------------------------------------

def kw_to_pu(feeder: Feeder, kw) -> np.ndarray:
    return np.asarray(kw, dtype=float) * 1000.0 / feeder.base_power_va


def user_demand_to_bus_pu(feeder: Feeder, p_kw: np.ndarray, q_kvar: np.ndarray) -> np.ndarray:
    """Map per-user (U, 3, T) kW/kvar arrays onto the bus axis in p.u."""
    fx = feeder_index(feeder)
    T = p_kw.shape[2]
    demand = np.zeros((fx.n_bus, 3, T), dtype=complex)
    s = kw_to_pu(feeder, p_kw) + 1j * kw_to_pu(feeder, q_kvar)
    for k in range(len(fx.users)):
        demand[fx.user_bus_pos[k]] += s[k]
    return demand


def forecast_demand_pu(feeder: Feeder, profiles: ProfileSet) -> np.ndarray:
    return user_demand_to_bus_pu(feeder, profiles.p_fx, profiles.q_fx)


def gtd_split_kw(feeder: Feeder, contracts: list[Contract]) -> tuple[np.ndarray, np.ndarray]:
    """Per-phase guaranteed demand (U, 3): the scalar threshold split evenly
    over each user's attachment phases."""
    fx = feeder_index(feeder)
    by_user = {c.user_id: c for c in contracts}
    p = np.zeros((len(fx.users), 3))
    q = np.zeros_like(p)
    for k, att in enumerate(fx.users):
        c = by_user[att.user_id]
        share = 1.0 / len(att.phases)
        for ph in att.phases:
            p[k, PHASE_INDEX[ph]] = c.p_gtd_kw * share
            q[k, PHASE_INDEX[ph]] = c.q_gtd * share
    return p, q


def gtd_demand_pu(feeder: Feeder, contracts: list[Contract], horizon: int = 1) -> np.ndarray:
    p, q = gtd_split_kw(feeder, contracts)
    return user_demand_to_bus_pu(
        feeder, np.repeat(p[:, :, None], horizon, axis=2), np.repeat(q[:, :, None], horizon, axis=2)
    )


def realized_demand_kw(
    feeder: Feeder, profiles: ProfileSet, contracts: list[Contract], s: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Demand under a status trajectory: forecast where s=0, the per-phase
    guaranteed threshold where s=1."""
    gp, gq = gtd_split_kw(feeder, contracts)
    sf = np.asarray(s, dtype=float)[:, None, :]
    p = sf * gp[:, :, None] + (1.0 - sf) * profiles.p_fx
    q = sf * gq[:, :, None] + (1.0 - sf) * profiles.q_fx
    return p, q


def schedule_demand_pu(
    feeder: Feeder, profiles: ProfileSet, contracts: list[Contract], s: np.ndarray
) -> np.ndarray:
    p, q = realized_demand_kw(feeder, profiles, contracts, s)
    return user_demand_to_bus_pu(feeder, p, q)


# ---------------------------------------------------------------------------
# Profile CSV format: header t,user,phase,p_kw,q_kvar
# ---------------------------------------------------------------------------

def save_profiles(profiles: ProfileSet, path, feeder: Feeder | None = None) -> None:
    """Write one row per (t, user, phase). With a feeder, rows cover every
    attachment phase; otherwise only phases carrying any nonzero value."""
    if feeder is not None:
        att = {a.user_id: a.phases for a in feeder.sorted_users()}
        phase_sets = [att[uid] for uid in profiles.users]
    else:
        phase_sets = []
        for k in range(len(profiles.users)):
            active = [
                PHASES[ph]
                for ph in range(3)
                if np.any(profiles.p_fx[k, ph]) or np.any(profiles.q_fx[k, ph])
            ]
            phase_sets.append(tuple(active) or ("a",))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "user", "phase", "p_kw", "q_kvar"])
        for t in range(profiles.horizon):
            for k, uid in enumerate(profiles.users):
                for ph in phase_sets[k]:
                    writer.writerow(
                        [
                            t,
                            uid,
                            ph,
                            repr(float(profiles.p_fx[k, PHASE_INDEX[ph], t])),
                            repr(float(profiles.q_fx[k, PHASE_INDEX[ph], t])),
                        ]
                    )


def load_profiles(path, feeder: Feeder | None = None, step_minutes: int = 15) -> ProfileSet:
    """Read the CSV schema back into a ProfileSet.

    Rejects duplicate (t, user, phase) triplets, ragged per-user horizons
    and (when a feeder is given) unknown users or phases.
    """
    rows: dict[tuple[str, str], dict[int, tuple[float, float]]] = {}
    max_t = -1
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"t", "user", "phase", "p_kw", "q_kvar"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"profile CSV must have columns {sorted(required)}")
        for line, row in enumerate(reader, start=2):
            try:
                t = int(row["t"])
                uid = row["user"].strip()
                ph = row["phase"].strip()
                p = float(row["p_kw"])
                q = float(row["q_kvar"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"malformed row {line}: {row}") from exc
            if ph not in PHASE_INDEX:
                raise ValueError(f"row {line}: unknown phase {ph!r}")
            if t < 0:
                raise ValueError(f"row {line}: negative timestep")
            group = rows.setdefault((uid, ph), {})
            if t in group:
                raise ValueError(f"duplicate profile row for (t={t}, user={uid}, phase={ph})")
            group[t] = (p, q)
            max_t = max(max_t, t)
    if max_t < 0:
        raise ValueError("profile CSV contains no data rows")
    horizon = max_t + 1
    for (uid, ph), group in rows.items():
        if len(group) != horizon or set(group) != set(range(horizon)):
            raise ValueError(
                f"inconsistent horizon for (user={uid}, phase={ph}): "
                f"{len(group)} rows, expected {horizon}"
            )

    csv_users = sorted({uid for uid, _ in rows})
    if feeder is not None:
        att = {a.user_id: a.phases for a in feeder.sorted_users()}
        unknown = [uid for uid in csv_users if uid not in att]
        if unknown:
            raise ValueError(f"profile users not present in the feeder: {unknown}")
        for uid, ph in rows:
            if ph not in att[uid]:
                raise ValueError(f"user {uid} is not attached to phase {ph}")
        users = tuple(sorted(att))
    else:
        users = tuple(csv_users)

    p = np.zeros((len(users), 3, horizon))
    q = np.zeros_like(p)
    pos = {uid: k for k, uid in enumerate(users)}
    for (uid, ph), group in rows.items():
        for t, (pv, qv) in group.items():
            p[pos[uid], PHASE_INDEX[ph], t] = pv
            q[pos[uid], PHASE_INDEX[ph], t] = qv
    return ProfileSet(users=users, horizon=horizon, step_minutes=step_minutes, p_fx=p, q_fx=q)
