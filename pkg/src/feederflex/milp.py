"""Multi-period mixed-integer OPF: model assembly, branch-and-bound solver,
exhaustive oracle and LP-format export.

The model couples per-user binary reduction trajectories to the linear
network constraints, minimizing the total number of active reduction steps.
LP relaxations are solved with HiGHS (via scipy); the integer search is an
in-repo best-first branch-and-bound on the status binaries.
"""

from __future__ import annotations

import heapq
import math
import re
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .acpf import solve_ac_pf
from .contracts import Contract, Schedule, canonical_y_z, window_start
from .linearflow import (
    BoundTightening,
    LinearConstraintBlock,
    VariableIndex,
    build_balance,
    build_limits,
    build_ohm,
    check_linear_limits,
    evaluate_lin_pf,
    flow_envelopes,
)
from .network import Feeder, PHASE_INDEX, feeder_index
from .scenarios import (
    ProfileSet,
    gtd_split_kw,
    kw_to_pu,
    realized_demand_kw,
    schedule_demand_pu,
    user_demand_to_bus_pu,
)


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------

@dataclass
class MILPModel:
    """Assembled constraint system over a :class:`VariableIndex`."""

    index: VariableIndex
    feeder: Feeder
    profiles: ProfileSet
    contracts: list[Contract]
    tighten: BoundTightening
    k_gon: int
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    labels_eq: list[str]
    a_ub: sp.csr_matrix
    b_ub: np.ndarray
    labels_ub: list[str]
    lo: np.ndarray
    hi: np.ndarray
    objective: np.ndarray
    time_separable: bool

    @property
    def horizon(self) -> int:
        return self.index.horizon

    @property
    def beta(self) -> int:
        """Number of declared binary variables."""
        return self.index.n_binary

    @property
    def n_vars(self) -> int:
        return self.index.n_vars


def user_response_rows(
    feeder: Feeder,
    profiles: ProfileSet,
    contracts: list[Contract],
    index: VariableIndex | None = None,
) -> LinearConstraintBlock:
    """Demand realization per (user, phase, t).

    demand = s * gtd + (1 - s) * forecast, linear in s:
    ``p - s * (gtd_p - fx_p) = fx_p`` (p.u.), same for q.
    """
    index = index or VariableIndex(feeder, profiles.horizon)
    fx = index.fx
    T = index.horizon
    by_user = {c.user_id: c for c in contracts}
    missing = [u.user_id for u in fx.users if u.user_id not in by_user]
    if missing:
        raise ValueError(f"missing contracts for users: {missing}")
    if tuple(u.user_id for u in fx.users) != profiles.users:
        raise ValueError("profiles are not aligned with the feeder user set")

    gp, gq = gtd_split_kw(feeder, contracts)
    gp_pu, gq_pu = kw_to_pu(feeder, gp), kw_to_pu(feeder, gq)
    fx_p = kw_to_pu(feeder, profiles.p_fx)
    fx_q = kw_to_pu(feeder, profiles.q_fx)

    rows, cols, vals, rhs_parts, labels, sense = [], [], [], [], [], []
    ts = np.arange(T)
    r0 = 0
    for k, att in enumerate(fx.users):
        for slot, ph_name in enumerate(att.phases):
            ph = PHASE_INDEX[ph_name]
            for comp, (inj_pos, gtd_v, fx_v, tag) in enumerate(
                [
                    (index.pinj_pos, gp_pu[k, ph], fx_p[k, ph], "p"),
                    (index.qinj_pos, gq_pu[k, ph], fx_q[k, ph], "q"),
                ]
            ):
                rr = r0 + comp * T + ts
                rows.append(rr)
                cols.append(np.asarray(inj_pos(k, slot, ts)))
                vals.append(np.ones(T))
                rows.append(rr)
                cols.append(np.asarray(index.s_pos(k, ts)))
                vals.append(-(gtd_v - fx_v))
                rhs_parts.append(fx_v)
                labels.extend(f"resp_{tag}[{att.user_id},{ph_name},{t}]" for t in range(T))
                sense.extend([b"="] * T)
            r0 += 2 * T
    return LinearConstraintBlock(
        index=index,
        rows=np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64),
        cols=np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64),
        vals=np.concatenate(vals) if vals else np.zeros(0),
        sense=np.array(sense, dtype="S1"),
        rhs=np.concatenate(rhs_parts) if rhs_parts else np.zeros(0),
        labels=labels,
    )


def comfort_rows(
    contracts: list[Contract],
    horizon: int,
    index: VariableIndex,
) -> LinearConstraintBlock:
    """Status/activation coupling and comfort guarantees.

    Per user with activation variables: the step identity
    ``s_t - s_{t-1} = y_t - z_t`` (t >= 1, boundary y_0 = s_0, z_0 = 0),
    the activation budget ``sum_t y <= eta``, the duration windows
    ``sum_{t' in [t-alpha, t]} s <= alpha`` and the restart-gap windows
    ``sum_{t' in [t-delta, t]} z <= 1 - s_t``. An aggregate capacity row
    ``sum_t s <= eta * alpha`` (implied for integer points) tightens the
    relaxation when both parameters are finite. Unlimited parameters emit
    no rows.
    """
    by_user = {c.user_id: c for c in contracts}
    T = horizon
    rows, cols, vals, rhs_l, labels, sense = [], [], [], [], [], []
    r = 0

    def add_row(entries, s_byte, rhs_v, label):
        nonlocal r
        for col, val in entries:
            rows.append(r)
            cols.append(col)
            vals.append(val)
        sense.append(s_byte)
        rhs_l.append(rhs_v)
        labels.append(label)
        r += 1

    for k, uid in enumerate(index.users):
        c = by_user[uid]
        if not index.has_yz[k]:
            continue
        add_row(
            [(index.y_pos(k, 0), 1.0), (index.s_pos(k, 0), -1.0)], b"=", 0.0, f"link0[{uid}]"
        )
        add_row([(index.z_pos(k, 0), 1.0)], b"=", 0.0, f"z0[{uid}]")
        for t in range(1, T):
            add_row(
                [
                    (index.s_pos(k, t), 1.0),
                    (index.s_pos(k, t - 1), -1.0),
                    (index.y_pos(k, t), -1.0),
                    (index.z_pos(k, t), 1.0),
                ],
                b"=",
                0.0,
                f"link[{uid},{t}]",
            )
        if c.eta is not None:
            add_row([(index.y_pos(k, t), 1.0) for t in range(T)], b"<", float(c.eta), f"eta[{uid}]")
        if c.alpha_steps is not None:
            a = c.alpha_steps
            for t in range(T):
                t0 = window_start(t, a)
                if t - t0 + 1 <= a:
                    continue  # short window can never exceed alpha
                add_row(
                    [(index.s_pos(k, tt), 1.0) for tt in range(t0, t + 1)],
                    b"<",
                    float(a),
                    f"alpha[{uid},{t}]",
                )
        if c.delta_steps > 0:
            d = c.delta_steps
            for t in range(T):
                t0 = window_start(t, d)
                add_row(
                    [(index.z_pos(k, tt), 1.0) for tt in range(t0, t + 1)]
                    + [(index.s_pos(k, t), 1.0)],
                    b"<",
                    1.0,
                    f"gap[{uid},{t}]",
                )
        else:
            for t in range(T):
                add_row(
                    [(index.z_pos(k, t), 1.0), (index.s_pos(k, t), 1.0)],
                    b"<",
                    1.0,
                    f"gap[{uid},{t}]",
                )
        if c.eta is not None and c.alpha_steps is not None:
            cap = float(c.eta * c.alpha_steps)
            if cap < T:
                add_row(
                    [(index.s_pos(k, t), 1.0) for t in range(T)], b"<", cap, f"cap[{uid}]"
                )

    return LinearConstraintBlock(
        index=index,
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        vals=np.asarray(vals, dtype=float),
        sense=np.array(sense, dtype="S1"),
        rhs=np.asarray(rhs_l, dtype=float),
        labels=labels,
    )


def _demand_rectangles(feeder, profiles, contracts):
    """Complex per-bus demand intervals attainable for any s in [0,1]."""
    gp, gq = gtd_split_kw(feeder, contracts)
    p_lo = np.minimum(profiles.p_fx, gp[:, :, None])
    p_hi = np.maximum(profiles.p_fx, gp[:, :, None])
    q_lo = np.minimum(profiles.q_fx, gq[:, :, None])
    q_hi = np.maximum(profiles.q_fx, gq[:, :, None])
    d_lo = user_demand_to_bus_pu(feeder, p_lo, q_lo)
    d_hi = user_demand_to_bus_pu(feeder, p_hi, q_hi)
    return d_lo, d_hi


def build_milp(
    feeder: Feeder,
    profiles: ProfileSet,
    contracts: list[Contract],
    tighten: BoundTightening | None = None,
    horizon: int | None = None,
    k_gon: int = 8,
    prune: bool = True,
) -> MILPModel:
    """Assemble the full scheduling model.

    Activation/deactivation binaries are elided for users whose contract has
    no binding comfort parameter. Single-variable limit rows become variable
    bounds; with ``prune`` enabled, thermal polygon rows that provably can
    never bind (interval arithmetic over all demand realizations) are
    dropped — neither transformation changes the feasible set.
    """
    tighten = tighten or BoundTightening()
    if horizon is not None and horizon != profiles.horizon:
        raise ValueError(f"horizon mismatch: profiles have {profiles.horizon}, expected {horizon}")
    T = profiles.horizon
    by_user = {c.user_id: c for c in contracts}
    users = [u.user_id for u in feeder.sorted_users()]
    missing = [uid for uid in users if uid not in by_user]
    if missing:
        raise ValueError(f"missing contracts for users: {missing}")

    yz_users = {uid for uid in users if not by_user[uid].is_simple}
    index = VariableIndex(feeder, T, yz_user_ids=yz_users)

    blocks = [
        user_response_rows(feeder, profiles, contracts, index),
        comfort_rows(contracts, T, index),
        build_balance(feeder, T, index),
        build_ohm(feeder, T, index),
    ]
    limits = build_limits(feeder, T, tighten, index, k_gon=k_gon)
    if prune:
        limits = _prune_limit_rows(limits, feeder, profiles, contracts, index, tighten, k_gon)
    blocks.append(limits)
    block = LinearConstraintBlock.concat(blocks)

    lo = np.full(index.n_vars, -np.inf)
    hi = np.full(index.n_vars, np.inf)
    lo[: index.n_binary] = 0.0
    hi[: index.n_binary] = 1.0
    # Source voltage pinned to the balanced reference.
    for slot in range(len(index.bus_phases[0])):
        cols = index.u_pos(0, slot, np.arange(T))
        lo[cols] = 1.0
        hi[cols] = 1.0

    a = block.matrix().tocsr()
    sense = block.sense
    rhs = block.rhs
    nnz_per_row = np.diff(a.indptr)

    # Fold single-variable <= rows into bounds.
    fold = (nnz_per_row == 1) & (sense == b"<")
    keep = ~fold
    for r in np.flatnonzero(fold):
        col = a.indices[a.indptr[r]]
        coef = a.data[a.indptr[r]]
        bound = rhs[r] / coef
        if coef > 0:
            hi[col] = min(hi[col], bound)
        else:
            lo[col] = max(lo[col], bound)

    eq_mask = keep & (sense == b"=")
    ub_mask = keep & (sense == b"<")
    a_eq = a[np.flatnonzero(eq_mask)]
    a_ub = a[np.flatnonzero(ub_mask)]
    labels = np.asarray(block.labels, dtype=object)

    objective = np.zeros(index.n_vars)
    objective[index.s_base : index.s_base + len(users) * T] = 1.0

    time_separable = all(by_user[uid].is_simple for uid in users)
    return MILPModel(
        index=index,
        feeder=feeder,
        profiles=profiles,
        contracts=list(contracts),
        tighten=tighten,
        k_gon=k_gon,
        a_eq=a_eq,
        b_eq=rhs[eq_mask],
        labels_eq=list(labels[eq_mask]),
        a_ub=a_ub,
        b_ub=rhs[ub_mask],
        labels_ub=list(labels[ub_mask]),
        lo=lo,
        hi=hi,
        objective=objective,
        time_separable=time_separable,
    )


def _prune_limit_rows(limits, feeder, profiles, contracts, index, tighten, k_gon):
    """Drop thermal rows whose left side cannot reach the right side for any
    binary assignment (interval bound over independent per-bus demands)."""
    from .linearflow import polygon_geometry

    d_lo, d_hi = _demand_rectangles(feeder, profiles, contracts)
    re_lo, re_hi, im_lo, im_hi = flow_envelopes(feeder, d_lo, d_hi)
    cosk, sink, shrink = polygon_geometry(k_gon)
    fx = index.fx
    T = index.horizon

    n_v = sum(len(index.bus_phases[b]) for b in range(1, fx.n_bus))
    n_voltage_rows = 2 * n_v * T
    keep = np.ones(limits.n_rows, dtype=bool)

    entries = []
    for k in range(fx.n_branch):
        for ph in fx.branch_phase_idx[k]:
            entries.append((k, int(ph)))
    n_th = len(entries)
    if n_th == 0:
        return limits

    # row id = n_voltage_rows + t * (n_th * K) + e * K + g  (build_limits order)
    upper = np.empty((T, n_th, k_gon))
    rhs = np.empty((T, n_th, k_gon))
    for e, (k, ph) in enumerate(entries):
        radius = fx.branch_rating[k] * (1.0 - tighten.delta_s) * shrink
        for g in range(k_gon):
            re_part = cosk[g] * np.where(cosk[g] > 0, re_hi[k, ph], re_lo[k, ph])
            im_part = sink[g] * np.where(sink[g] > 0, im_hi[k, ph], im_lo[k, ph])
            upper[:, e, g] = re_part + im_part
            rhs[:, e, g] = radius
    removable = (upper <= rhs - 1e-12).ravel()
    keep[n_voltage_rows:] = ~removable
    return limits.filter_rows(keep)


# ---------------------------------------------------------------------------
# LP relaxation
# ---------------------------------------------------------------------------

@dataclass
class InfeasibilityCertificate:
    """Phase-1 evidence of infeasibility: the minimal total constraint
    violation (> 0) and the dual vector of the elastic feasibility LP."""

    violation: float
    duals_eq: np.ndarray
    duals_ub: np.ndarray


@dataclass
class LPRelaxResult:
    status: str  # "optimal" | "infeasible" | "numerical"
    objective: float | None = None
    x: np.ndarray | None = None
    certificate: InfeasibilityCertificate | None = None


def lp_relax_solve(
    model: MILPModel,
    fixed: dict[int, float] | None = None,
    certificate: bool = False,
) -> LPRelaxResult:
    """Exact LP optimum with binaries boxed to [0, 1] and optionally fixed.

    Numerical trouble is reported as its own status, distinct from proven
    infeasibility. With ``certificate=True``, infeasible outcomes carry the
    duals of an elastic phase-1 LP as evidence.
    """
    lo = model.lo.copy()
    hi = model.hi.copy()
    if fixed:
        for col, val in fixed.items():
            lo[col] = val
            hi[col] = val
    res = linprog(
        model.objective,
        A_ub=model.a_ub if model.a_ub.shape[0] else None,
        b_ub=model.b_ub if model.a_ub.shape[0] else None,
        A_eq=model.a_eq if model.a_eq.shape[0] else None,
        b_eq=model.b_eq if model.a_eq.shape[0] else None,
        bounds=np.column_stack([lo, hi]),
        method="highs",
    )
    if res.status == 0:
        return LPRelaxResult(status="optimal", objective=float(res.fun), x=res.x)
    if res.status == 2:
        cert = _phase1_certificate(model, lo, hi) if certificate else None
        return LPRelaxResult(status="infeasible", certificate=cert)
    if res.status == 3:  # cannot happen with a bounded objective; defensive
        return LPRelaxResult(status="numerical")
    return LPRelaxResult(status="numerical")


def _phase1_certificate(model, lo, hi) -> InfeasibilityCertificate | None:
    n = model.n_vars
    m_eq, m_ub = model.a_eq.shape[0], model.a_ub.shape[0]
    a_eq = sp.hstack(
        [model.a_eq, sp.eye(m_eq), -sp.eye(m_eq), sp.csr_matrix((m_eq, m_ub))], format="csr"
    ) if m_eq else None
    a_ub = sp.hstack(
        [model.a_ub, sp.csr_matrix((m_ub, 2 * m_eq)), -sp.eye(m_ub)], format="csr"
    ) if m_ub else None
    n_art = 2 * m_eq + m_ub
    c = np.concatenate([np.zeros(n), np.ones(n_art)])
    bounds = np.column_stack(
        [np.concatenate([lo, np.zeros(n_art)]), np.concatenate([hi, np.full(n_art, np.inf)])]
    )
    res = linprog(
        c,
        A_ub=a_ub,
        b_ub=model.b_ub if m_ub else None,
        A_eq=a_eq,
        b_eq=model.b_eq if m_eq else None,
        bounds=bounds,
        method="highs",
    )
    if res.status != 0 or res.fun <= 1e-9:
        return None
    return InfeasibilityCertificate(
        violation=float(res.fun),
        duals_eq=np.asarray(res.eqlin.marginals) if m_eq else np.zeros(0),
        duals_ub=np.asarray(res.ineqlin.marginals) if m_ub else np.zeros(0),
    )


# ---------------------------------------------------------------------------
# Branch and bound
# ---------------------------------------------------------------------------

@dataclass
class SolveOptions:
    gap_tol: float = 0.0
    time_limit: float | None = None
    int_tol: float = 1e-6
    node_limit: int | None = None


@dataclass
class SolveResult:
    status: str  # "optimal" | "infeasible" | "timeout"
    schedule: Schedule | None
    objective: int | None
    best_bound: float
    nodes: int
    wall_seconds: float

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"


def _schedule_from_s(feeder, profiles, contracts, s_mat) -> Schedule:
    s_mat = np.asarray(s_mat, dtype=np.int8)
    y, z = canonical_y_z(s_mat)
    p, q = realized_demand_kw(feeder, profiles, contracts, s_mat)
    return Schedule(
        users=tuple(u.user_id for u in feeder.sorted_users()),
        horizon=profiles.horizon,
        s=s_mat,
        y=y,
        z=z,
        p_kw=p,
        q_kvar=q,
    )


def _comfort_ok(s_mat: np.ndarray, contracts: list[Contract], users: list[str]) -> bool:
    by_user = {c.user_id: c for c in contracts}
    _, z = canonical_y_z(s_mat)
    T = s_mat.shape[1]
    for k, uid in enumerate(users):
        c = by_user[uid]
        if c.is_simple:
            continue
        su, zu = s_mat[k], z[k]
        if c.eta is not None:
            prev = np.concatenate([[0], su[:-1]])
            if int(((su == 1) & (prev == 0)).sum()) > c.eta:
                return False
        if c.alpha_steps is not None:
            a = c.alpha_steps
            cs = np.concatenate([[0], np.cumsum(su)])
            for t in range(a, T):
                if cs[t + 1] - cs[window_start(t, a)] > a:
                    return False
        if c.delta_steps > 0:
            d = c.delta_steps
            cz = np.concatenate([[0], np.cumsum(zu)])
            for t in range(T):
                if cz[t + 1] - cz[window_start(t, d)] > 1 - su[t]:
                    return False
    return True


def _network_ok(model: MILPModel, s_mat: np.ndarray) -> np.ndarray:
    demand = schedule_demand_pu(model.feeder, model.profiles, model.contracts, s_mat)
    pf = evaluate_lin_pf(model.feeder, demand)
    return check_linear_limits(model.feeder, pf, model.tighten, model.k_gon)


def _candidate_ok(model: MILPModel, s_mat: np.ndarray) -> bool:
    users = [u.user_id for u in model.feeder.sorted_users()]
    return _comfort_ok(s_mat, model.contracts, users) and bool(_network_ok(model, s_mat).all())


def _s_matrix_from_x(model: MILPModel, x: np.ndarray) -> np.ndarray:
    n_users = len(model.index.users)
    T = model.horizon
    return x[model.index.s_base : model.index.s_base + n_users * T].reshape(n_users, T)


def _pattern_blocks(su: np.ndarray) -> list[list[int]]:
    """Maximal [start, end] runs of ones."""
    blocks = []
    run_start = None
    for t, v in enumerate(su):
        if v and run_start is None:
            run_start = t
        elif not v and run_start is not None:
            blocks.append([run_start, t - 1])
            run_start = None
    if run_start is not None:
        blocks.append([run_start, len(su) - 1])
    return blocks


def _repair_pattern(su: np.ndarray, contract: Contract) -> np.ndarray | None:
    """Smallest covering comfort repair of a rounded pattern.

    Gaps at or below the minimum idle interval are filled, then blocks are
    merged (shortest gap first) until the activation budget holds. Filling
    only adds reduction steps, so a network-feasible pattern stays
    network-feasible wherever more reduction helps. Returns None when the
    duration cap makes a covering repair impossible.
    """
    if contract.is_simple:
        return su
    su = su.copy()

    def fill_smallest_gap(blocks, limit=None):
        gaps = [
            (blocks[i + 1][0] - blocks[i][1] - 1, i) for i in range(len(blocks) - 1)
        ]
        if limit is not None:
            gaps = [g for g in gaps if g[0] <= limit]
        if not gaps:
            return False
        _, i = min(gaps)
        su[blocks[i][1] + 1 : blocks[i + 1][0]] = 1
        return True

    while True:
        blocks = _pattern_blocks(su)
        if len(blocks) < 2 or not fill_smallest_gap(blocks, limit=contract.delta_steps):
            break
    if contract.eta is not None:
        while True:
            blocks = _pattern_blocks(su)
            if len(blocks) <= contract.eta or not fill_smallest_gap(blocks):
                break
        if len(_pattern_blocks(su)) > contract.eta:
            return None
    if contract.alpha_steps is not None:
        blocks = _pattern_blocks(su)
        if blocks and max(e - s + 1 for s, e in blocks) > contract.alpha_steps:
            return None
    return su


class _Node:
    __slots__ = ("bound", "seq", "fixed", "frac")

    def __init__(self, bound, seq, fixed, frac):
        self.bound = bound
        self.seq = seq
        self.fixed = fixed
        self.frac = frac

    def __lt__(self, other):
        # Best bound first; among equal bounds, the most recent node (a
        # depth-first dive toward integral leaves).
        return (self.bound, -self.seq) < (other.bound, -other.seq)


def _solve_single(
    model: MILPModel,
    options: SolveOptions,
    deadline: float | None,
    floor_bound: float = 0.0,
    warm_start: np.ndarray | None = None,
    base_fixed: dict[int, float] | None = None,
) -> SolveResult:
    """Best-first branch-and-bound on the status binaries of one model.

    ``floor_bound`` is an externally proven lower bound on the optimum (from
    the comfort-free relaxation); it lifts every node bound. ``warm_start``
    seeds the incumbent heuristics. ``base_fixed`` pins variables proven
    fixable at the root (applied to every node).
    """
    t_start = time.monotonic()
    int_tol = options.int_tol
    base_fixed = base_fixed or {}
    nodes = 0

    incumbent_s: np.ndarray | None = None
    incumbent_obj = math.inf

    def timeout() -> bool:
        return deadline is not None and time.monotonic() > deadline

    users = [u.user_id for u in model.feeder.sorted_users()]
    by_user = {c.user_id: c for c in model.contracts}

    def try_heuristics(s_frac: np.ndarray) -> None:
        nonlocal incumbent_s, incumbent_obj
        for cand in (np.rint(s_frac), (s_frac > int_tol).astype(float)):
            cand = cand.astype(np.int8)
            repaired = np.empty_like(cand)
            ok = True
            for k, uid in enumerate(users):
                patched = _repair_pattern(cand[k], by_user[uid])
                if patched is None:
                    ok = False
                    break
                repaired[k] = patched
            if not ok:
                continue
            obj = int(repaired.sum())
            if obj >= incumbent_obj:
                continue
            if _candidate_ok(model, repaired):
                incumbent_s, incumbent_obj = repaired, obj

    def lp_bound(value: float) -> float:
        # The objective is a sum of binaries, hence integral.
        return max(math.ceil(value - 1e-6), floor_bound)

    root = lp_relax_solve(model, base_fixed if base_fixed else None)
    nodes += 1
    if root.status == "infeasible":
        return SolveResult("infeasible", None, None, math.inf, nodes, time.monotonic() - t_start)
    if root.status != "optimal":
        raise RuntimeError("LP relaxation failed numerically at the root")
    if warm_start is not None:
        try_heuristics(warm_start.astype(float))

    def process(result: LPRelaxResult):
        """Returns ('leaf', obj, s) for integral solutions, else ('open', frac)."""
        nonlocal incumbent_s, incumbent_obj
        s_frac = _s_matrix_from_x(model, result.x)
        frac = np.abs(s_frac - np.rint(s_frac))
        if frac.max() <= int_tol:
            s_int = np.rint(s_frac).astype(np.int8)
            obj = int(s_int.sum())
            if obj < incumbent_obj:
                incumbent_s, incumbent_obj = s_int, obj
            return None
        try_heuristics(s_frac)
        return frac

    frac = process(root)
    heap: list[_Node] = []
    seq = 0
    if frac is not None:
        heapq.heappush(heap, _Node(lp_bound(root.objective), seq, dict(base_fixed), frac))
        seq += 1

    while heap:
        node = heapq.heappop(heap)
        if incumbent_obj < math.inf:
            gap = incumbent_obj - node.bound
            if gap <= 0 or gap <= options.gap_tol * max(1.0, abs(incumbent_obj)):
                break
        out_of_budget = timeout() or (
            options.node_limit is not None and nodes >= options.node_limit
        )
        if out_of_budget:
            return SolveResult(
                "timeout",
                _schedule_from_s(model.feeder, model.profiles, model.contracts, incumbent_s)
                if incumbent_s is not None
                else None,
                int(incumbent_obj) if incumbent_s is not None else None,
                float(node.bound),
                nodes,
                time.monotonic() - t_start,
            )

        s_flat = node.frac.ravel()
        # Most fractional status variable; ties -> lowest user id, then time.
        j_local = int(np.lexsort((np.arange(s_flat.size), -s_flat))[0])
        col = model.index.s_base + j_local

        for val in (0.0, 1.0):
            fixed = dict(node.fixed)
            fixed[col] = val
            child = lp_relax_solve(model, fixed)
            nodes += 1
            if child.status == "infeasible":
                continue
            if child.status != "optimal":
                raise RuntimeError("LP relaxation failed numerically during search")
            bound = lp_bound(child.objective)
            if bound >= incumbent_obj:
                continue
            child_frac = process(child)
            if child_frac is not None:
                heapq.heappush(heap, _Node(bound, seq, fixed, child_frac))
                seq += 1

    wall = time.monotonic() - t_start
    if incumbent_s is None:
        return SolveResult("infeasible", None, None, math.inf, nodes, wall)
    schedule = _schedule_from_s(model.feeder, model.profiles, model.contracts, incumbent_s)
    return SolveResult("optimal", schedule, int(incumbent_obj), float(incumbent_obj), nodes, wall)


def _slice_profiles(profiles: ProfileSet, t: int) -> ProfileSet:
    return ProfileSet(
        users=profiles.users,
        horizon=1,
        step_minutes=profiles.step_minutes,
        p_fx=profiles.p_fx[:, :, t : t + 1].copy(),
        q_fx=profiles.q_fx[:, :, t : t + 1].copy(),
    )


def solve_milp(model: MILPModel, options: SolveOptions | None = None) -> SolveResult:
    """Solve to proven optimality (or infeasibility / timeout).

    Time-separable models (every contract unlimited) decompose into
    independent single-period problems, each handled by the same
    branch-and-bound. Comfort-constrained models are preceded by their
    comfort-free relaxation, whose optimum is a valid global lower bound
    (feasible-set nesting), whose infeasibility proves infeasibility, and
    whose schedule seeds the incumbent heuristics. An all-zero schedule
    that already satisfies every constraint short-circuits everything.
    """
    options = options or SolveOptions()
    t_start = time.monotonic()
    deadline = t_start + options.time_limit if options.time_limit else None
    n_users = len(model.index.users)
    T = model.horizon

    zero = np.zeros((n_users, T), dtype=np.int8)
    ok_t = _network_ok(model, zero)
    if ok_t.all():
        schedule = _schedule_from_s(model.feeder, model.profiles, model.contracts, zero)
        return SolveResult("optimal", schedule, 0, 0.0, 0, time.monotonic() - t_start)

    if model.time_separable:
        if T == 1:
            return _solve_single(model, options, deadline)
        s_full = np.zeros((n_users, T), dtype=np.int8)
        total_nodes = 0
        for t in range(T):
            if ok_t[t]:
                continue
            if deadline is not None and time.monotonic() > deadline:
                return SolveResult(
                    "timeout", None, None, float(s_full.sum()), total_nodes,
                    time.monotonic() - t_start,
                )
            sub = build_milp(
                model.feeder,
                _slice_profiles(model.profiles, t),
                model.contracts,
                model.tighten,
                k_gon=model.k_gon,
            )
            res = _solve_single(sub, options, deadline)
            total_nodes += res.nodes
            if res.status == "infeasible":
                return SolveResult(
                    "infeasible", None, None, math.inf, total_nodes, time.monotonic() - t_start
                )
            if res.status == "timeout":
                return SolveResult(
                    "timeout", None, None, float(s_full.sum()), total_nodes,
                    time.monotonic() - t_start,
                )
            s_full[:, t] = res.schedule.s[:, 0]
        schedule = _schedule_from_s(model.feeder, model.profiles, model.contracts, s_full)
        return SolveResult(
            "optimal",
            schedule,
            int(s_full.sum()),
            float(s_full.sum()),
            total_nodes,
            time.monotonic() - t_start,
        )

    relax_contracts = [
        Contract(c.user_id, c.p_gtd_kw, c.q_gtd_kvar, None, None, 0) for c in model.contracts
    ]
    relax_model = build_milp(
        model.feeder, model.profiles, relax_contracts, model.tighten, k_gon=model.k_gon
    )
    relax_opts = SolveOptions(
        gap_tol=0.0,
        time_limit=(deadline - time.monotonic()) if deadline else None,
        int_tol=options.int_tol,
    )
    relax = solve_milp(relax_model, relax_opts)
    if relax.status != "optimal":
        return SolveResult(
            relax.status, None, None, relax.best_bound, relax.nodes, time.monotonic() - t_start
        )
    users = [u.user_id for u in model.feeder.sorted_users()]
    if _comfort_ok(relax.schedule.s, model.contracts, users):
        schedule = _schedule_from_s(model.feeder, model.profiles, model.contracts, relax.schedule.s)
        return SolveResult(
            "optimal",
            schedule,
            relax.objective,
            float(relax.objective),
            relax.nodes,
            time.monotonic() - t_start,
        )
    # Outside the [first, last] congested-step window any schedule can be
    # trimmed to inactivity without losing feasibility (clipped blocks stay
    # contiguous and within budget; trimmed steps revert to the forecast
    # state, which is feasible there), so those binaries are pinned to 0.
    congested = np.flatnonzero(~ok_t)
    base_fixed: dict[int, float] = {}
    t_lo, t_hi = int(congested[0]), int(congested[-1])
    for k in range(n_users):
        for t in range(T):
            if t < t_lo or t > t_hi:
                base_fixed[int(model.index.s_pos(k, t))] = 0.0

    res = _solve_single(
        model,
        options,
        deadline,
        floor_bound=float(relax.objective),
        warm_start=relax.schedule.s,
        base_fixed=base_fixed,
    )
    return SolveResult(
        res.status,
        res.schedule,
        res.objective,
        res.best_bound,
        res.nodes + relax.nodes,
        time.monotonic() - t_start,
    )


def verify_model_solution(model: MILPModel, x: np.ndarray, tol: float = 1e-6) -> list[str]:
    """Generic row check of a full variable assignment against the model."""
    problems = []
    if model.a_eq.shape[0]:
        resid = np.abs(model.a_eq @ x - model.b_eq)
        for r in np.flatnonzero(resid > tol):
            problems.append(f"{model.labels_eq[r]}: equality residual {resid[r]:.3e}")
    if model.a_ub.shape[0]:
        slack = model.a_ub @ x - model.b_ub
        for r in np.flatnonzero(slack > tol):
            problems.append(f"{model.labels_ub[r]}: exceeded by {slack[r]:.3e}")
    if np.any(x < model.lo - tol) or np.any(x > model.hi + tol):
        problems.append("variable bound violated")
    return problems


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------

def _popcount32(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint32).copy()
    v = v - ((v >> np.uint32(1)) & np.uint32(0x55555555))
    v = (v & np.uint32(0x33333333)) + ((v >> np.uint32(2)) & np.uint32(0x33333333))
    v = (v + (v >> np.uint32(4))) & np.uint32(0x0F0F0F0F)
    return (v * np.uint32(0x01010101)) >> np.uint32(24)


def brute_force_schedule(
    feeder: Feeder,
    profiles: ProfileSet,
    contracts: list[Contract],
    tighten: BoundTightening | None = None,
    checker: str = "lin",
    cap: int = 20,
    k_gon: int = 8,
) -> SolveResult:
    """Exhaustive optimal schedule for tiny instances.

    Enumerates every binary status assignment (users x timesteps <= cap),
    filters by comfort feasibility (canonical activation derivation) and by
    per-timestep network feasibility under the chosen checker ("lin": the
    same tightened polygonal limits as the MILP, evaluated by direct power
    flow; "ac": exact AC power flow against the tightened circular limits).
    Ties are broken toward the lexicographically smallest assignment.
    """
    tighten = tighten or BoundTightening()
    t_start = time.monotonic()
    fx = feeder_index(feeder)
    users = [u.user_id for u in fx.users]
    U, T = len(users), profiles.horizon
    if U * T > cap:
        raise ValueError(f"instance size {U}x{T} exceeds the oracle cap {cap}")
    if checker not in ("lin", "ac"):
        raise ValueError("checker must be 'lin' or 'ac'")
    if checker == "ac" and T * (1 << U) > 20_000:
        raise ValueError("AC checker would need too many power flows; use checker='lin'")

    from .contracts import feasible_pattern_table

    by_user = {c.user_id: c for c in contracts}
    pattern_ok = np.ones((U, 1 << T), dtype=bool)
    for k, uid in enumerate(users):
        pattern_ok[k] = feasible_pattern_table(by_user[uid], T)

    # Network feasibility of every (timestep, active-user subset).
    gp, gq = gtd_split_kw(feeder, contracts)
    subset_ok = np.zeros((T, 1 << U), dtype=bool)
    n_sub = 1 << U
    codes = np.arange(n_sub, dtype=np.uint32)
    for t in range(T):
        p = np.repeat(profiles.p_fx[:, :, t][:, :, None], n_sub, axis=2)
        q = np.repeat(profiles.q_fx[:, :, t][:, :, None], n_sub, axis=2)
        for k in range(U):
            active = ((codes >> np.uint32(k)) & 1).astype(bool)
            p[k][:, active] = gp[k][:, None]
            q[k][:, active] = gq[k][:, None]
        demand = user_demand_to_bus_pu(feeder, p, q)
        if checker == "lin":
            pf = evaluate_lin_pf(feeder, demand)
            subset_ok[t] = check_linear_limits(feeder, pf, tighten, k_gon)
        else:
            sol = solve_ac_pf(feeder, demand)
            subset_ok[t] = _ac_limits_ok(feeder, sol, tighten)

    best_mask = -1
    best_obj = U * T + 1
    n_masks = 1 << (U * T)
    chunk = 1 << 18
    for start in range(0, n_masks, chunk):
        masks = np.arange(start, min(start + chunk, n_masks), dtype=np.uint32)
        ok = np.ones(masks.shape, dtype=bool)
        pattern_mask = np.uint32((1 << T) - 1)
        for k in range(U):
            pat = (masks >> np.uint32(k * T)) & pattern_mask
            ok &= pattern_ok[k][pat]
        if not ok.any():
            continue
        for t in range(T):
            code = np.zeros(masks.shape, dtype=np.uint32)
            for k in range(U):
                code |= ((masks >> np.uint32(k * T + t)) & np.uint32(1)) << np.uint32(k)
            ok &= subset_ok[t][code]
            if not ok.any():
                break
        if not ok.any():
            continue
        cand = masks[ok]
        obj = _popcount32(cand)
        j = int(np.lexsort((cand, obj))[0])
        if int(obj[j]) < best_obj:
            best_obj = int(obj[j])
            best_mask = int(cand[j])

    wall = time.monotonic() - t_start
    if best_mask < 0:
        return SolveResult("infeasible", None, None, math.inf, n_masks, wall)
    s = np.zeros((U, T), dtype=np.int8)
    for k in range(U):
        for t in range(T):
            s[k, t] = (best_mask >> (k * T + t)) & 1
    schedule = _schedule_from_s(feeder, profiles, contracts, s)
    return SolveResult("optimal", schedule, best_obj, float(best_obj), n_masks, wall)


def _ac_limits_ok(feeder: Feeder, sol, tighten: BoundTightening) -> np.ndarray:
    """Per-timestep satisfaction of the circular limits by an AC solution."""
    fx = feeder_index(feeder)
    if not sol.converged:
        return np.zeros(sol.v.shape[2], dtype=bool)
    T = sol.v.shape[2]
    ok = np.ones(T, dtype=bool)
    vmag = np.abs(sol.v)
    mask = fx.bus_phase_mask & ~fx.is_source[:, None]
    lo = (fx.vmin + tighten.delta_v)[:, None]
    hi = fx.vmax[:, None]
    for ph in range(3):
        rows = np.flatnonzero(mask[:, ph])
        if rows.size:
            vv = vmag[rows, ph, :]
            ok &= np.all(vv >= lo[rows], axis=0) & np.all(vv <= hi[rows], axis=0)
    smag = np.abs(sol.s_flow)
    for k in range(fx.n_branch):
        rating = fx.branch_rating[k] * (1.0 - tighten.delta_s)
        ok &= np.all(smag[k, fx.branch_phase_idx[k], :] <= rating, axis=0)
    return ok


def relative_objective_error(o_a: int, o_b: int, beta: int) -> float:
    """Absolute objective difference normalized by the binary count."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return abs(o_a - o_b) / beta


# ---------------------------------------------------------------------------
# LP-format export / assignment import
# ---------------------------------------------------------------------------

def _sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_]", "_", name)


def export_lp(model: MILPModel, path) -> None:
    """Write the model in CPLEX LP text format for external cross-checks."""
    names = [_sanitize(n) for n in model.index.column_names()]
    lines = ["\\ feederflex scheduling model", "Minimize"]
    obj_terms = [f"+ {names[j]}" for j in np.flatnonzero(model.objective)]
    lines.append(" obj: " + (" ".join(obj_terms) if obj_terms else "0"))
    lines.append("Subject To")

    def emit(a: sp.csr_matrix, rhs: np.ndarray, labels: list[str], op: str):
        for r in range(a.shape[0]):
            terms = []
            for k in range(a.indptr[r], a.indptr[r + 1]):
                terms.append(f"{a.data[k]:+.17g} {names[a.indices[k]]}")
            lines.append(f" {_sanitize(labels[r])}: {' '.join(terms)} {op} {rhs[r]:.17g}")

    emit(model.a_eq, model.b_eq, model.labels_eq, "=")
    emit(model.a_ub, model.b_ub, model.labels_ub, "<=")

    lines.append("Bounds")
    for j in range(model.n_vars):
        lo, hi = model.lo[j], model.hi[j]
        if lo == hi:
            lines.append(f" {names[j]} = {lo:.17g}")
        elif np.isinf(lo) and np.isinf(hi):
            lines.append(f" {names[j]} free")
        elif np.isinf(lo):
            lines.append(f" -inf <= {names[j]} <= {hi:.17g}")
        elif np.isinf(hi):
            lines.append(f" {lo:.17g} <= {names[j]} <= +inf")
        else:
            lines.append(f" {lo:.17g} <= {names[j]} <= {hi:.17g}")
    lines.append("Binary")
    for j in range(model.index.n_binary):
        lines.append(f" {names[j]}")
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_assignment(path) -> dict[str, float]:
    """Read an externally produced `name value` assignment listing."""
    out: dict[str, float] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith(("#", "\\", "//")):
                continue
            parts = line.split()
            if len(parts) < 2:
                continue
            try:
                out[parts[0]] = float(parts[1])
            except ValueError:
                continue
    return out


def schedule_from_assignment(model: MILPModel, assignment: dict[str, float]) -> Schedule:
    """Rebuild a schedule from an external solver's variable assignment
    (only the status binaries are consulted)."""
    T = model.horizon
    users = model.index.users
    s = np.zeros((len(users), T), dtype=np.int8)
    names = model.index.column_names()
    for k in range(len(users)):
        for t in range(T):
            name = _sanitize(names[model.index.s_base + k * T + t])
            val = assignment.get(name, 0.0)
            s[k, t] = 1 if val > 0.5 else 0
    return _schedule_from_s(model.feeder, model.profiles, model.contracts, s)
