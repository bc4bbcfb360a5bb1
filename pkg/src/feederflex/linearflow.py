"""Linearized three-phase branch-flow model for radial feeders.

Voltage magnitudes enter squared (``u`` variables, p.u.^2), branch flows as
per-phase complex powers (``lambda`` variables). Losses are neglected in the
power balance; off-diagonal three-phase coupling is approximated through a
constant rotation matrix valid for nearly balanced voltages. The resulting
constraint system is linear in {u, Re lambda, Im lambda, demands} and is
consumed by the scheduling MILP; :func:`evaluate_lin_pf` solves the same
equations directly for fixed demands.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .network import Feeder, FeederIndex, PHASES, feeder_index

#: Phase rotation alpha = exp(-i 2 pi / 3).
ALPHA = np.exp(-2j * np.pi / 3)

_GAMMA = np.array(
    [
        [1.0, ALPHA**2, ALPHA],
        [ALPHA, 1.0, ALPHA**2],
        [ALPHA**2, ALPHA, 1.0],
    ],
    dtype=complex,
)


def gamma_matrix() -> np.ndarray:
    """Constant Hermitian phase-coupling matrix (unit diagonal, |entry| = 1)."""
    return _GAMMA.copy()


def offdiag_flow(lam) -> np.ndarray:
    """Full 3x3 flow matrix reconstructed from the per-phase diagonal.

    Element (p, q) is ``gamma[p, q] * lam[q]``; the diagonal equals ``lam``.
    Missing phases should be zero-filled by the caller.
    """
    lam = np.asarray(lam, dtype=complex)
    if lam.shape != (3,):
        raise ValueError("expected a 3-vector of per-phase flows")
    return _GAMMA * lam[np.newaxis, :]


@dataclass
class BoundTightening:
    """Margins applied inside the linear model so its schedules survive the
    exact AC check: the voltage floor is raised by ``delta_v`` (p.u.) and
    thermal ratings scaled by ``1 - delta_s``."""

    delta_v: float = 0.0
    delta_s: float = 0.0

    def __post_init__(self):
        if self.delta_v < 0.0:
            raise ValueError("delta_v must be >= 0")
        if not (0.0 <= self.delta_s < 1.0):
            raise ValueError("delta_s must lie in [0, 1)")


class VariableIndex:
    """Deterministic column layout shared by all constraint blocks.

    Binary columns come first (s, then y, then z, user-major, time within
    user), followed by demand variables (p, q per user phase), squared
    voltages (bus-major over present phases) and branch-flow components.
    """

    def __init__(self, feeder: Feeder, horizon: int, yz_user_ids=None):
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        self.feeder = feeder
        self.fx: FeederIndex = feeder_index(feeder)
        self.horizon = int(horizon)
        self.users = [u.user_id for u in self.fx.users]
        if yz_user_ids is None:
            yz_user_ids = set(self.users)
        self.has_yz = np.array([uid in yz_user_ids for uid in self.users], dtype=bool)

        T = self.horizon
        n_users = len(self.users)
        self.s_base = 0
        pos = n_users * T
        self.y_base = np.full(n_users, -1, dtype=np.int64)
        for k in range(n_users):
            if self.has_yz[k]:
                self.y_base[k] = pos
                pos += T
        self.z_base = np.full(n_users, -1, dtype=np.int64)
        for k in range(n_users):
            if self.has_yz[k]:
                self.z_base[k] = pos
                pos += T
        self.n_binary = pos

        self.pinj_base = np.zeros(n_users, dtype=np.int64)
        for k, att in enumerate(self.fx.users):
            self.pinj_base[k] = pos
            pos += len(att.phases) * T
        self.qinj_base = np.zeros(n_users, dtype=np.int64)
        for k, att in enumerate(self.fx.users):
            self.qinj_base[k] = pos
            pos += len(att.phases) * T

        self.u_base = np.zeros(self.fx.n_bus, dtype=np.int64)
        self.bus_phases = [np.flatnonzero(self.fx.bus_phase_mask[b]) for b in range(self.fx.n_bus)]
        for b in range(self.fx.n_bus):
            self.u_base[b] = pos
            pos += len(self.bus_phases[b]) * T

        self.lre_base = np.zeros(self.fx.n_branch, dtype=np.int64)
        for k in range(self.fx.n_branch):
            self.lre_base[k] = pos
            pos += len(self.fx.branch_phase_idx[k]) * T
        self.lim_base = np.zeros(self.fx.n_branch, dtype=np.int64)
        for k in range(self.fx.n_branch):
            self.lim_base[k] = pos
            pos += len(self.fx.branch_phase_idx[k]) * T
        self.n_vars = pos
        self._names: list[str] | None = None

    # -- position helpers (slot = index of the phase within the entity) ----
    def s_pos(self, user: int, t) -> np.ndarray | int:
        return self.s_base + user * self.horizon + np.asarray(t)

    def y_pos(self, user: int, t):
        base = self.y_base[user]
        if base < 0:
            raise KeyError(f"user {self.users[user]} has no activation variables")
        return base + np.asarray(t)

    def z_pos(self, user: int, t):
        base = self.z_base[user]
        if base < 0:
            raise KeyError(f"user {self.users[user]} has no deactivation variables")
        return base + np.asarray(t)

    def pinj_pos(self, user: int, slot: int, t):
        return self.pinj_base[user] + slot * self.horizon + np.asarray(t)

    def qinj_pos(self, user: int, slot: int, t):
        return self.qinj_base[user] + slot * self.horizon + np.asarray(t)

    def u_pos(self, bus: int, slot: int, t):
        return self.u_base[bus] + slot * self.horizon + np.asarray(t)

    def u_slot(self, bus: int, phase: int) -> int:
        slots = np.flatnonzero(self.bus_phases[bus] == phase)
        if slots.size == 0:
            raise KeyError(f"phase {PHASES[phase]} absent at bus {self.fx.bus_order[bus]}")
        return int(slots[0])

    def lre_pos(self, branch: int, slot: int, t):
        return self.lre_base[branch] + slot * self.horizon + np.asarray(t)

    def lim_pos(self, branch: int, slot: int, t):
        return self.lim_base[branch] + slot * self.horizon + np.asarray(t)

    @property
    def binary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vars, dtype=bool)
        mask[: self.n_binary] = True
        return mask

    def column_names(self) -> list[str]:
        if self._names is not None:
            return self._names
        T = self.horizon
        names = [""] * self.n_vars
        for k, uid in enumerate(self.users):
            for t in range(T):
                names[self.s_base + k * T + t] = f"s_{uid}_{t}"
            if self.has_yz[k]:
                for t in range(T):
                    names[self.y_base[k] + t] = f"y_{uid}_{t}"
                    names[self.z_base[k] + t] = f"z_{uid}_{t}"
        for k, att in enumerate(self.fx.users):
            for slot, ph in enumerate(att.phases):
                for t in range(T):
                    names[self.pinj_pos(k, slot, t)] = f"p_{att.user_id}_{ph}_{t}"
                    names[self.qinj_pos(k, slot, t)] = f"q_{att.user_id}_{ph}_{t}"
        for b in range(self.fx.n_bus):
            bid = self.fx.bus_order[b]
            for slot, ph in enumerate(self.bus_phases[b]):
                for t in range(T):
                    names[self.u_pos(b, slot, t)] = f"u_{bid}_{PHASES[ph]}_{t}"
        for k in range(self.fx.n_branch):
            br = self.fx.branches[k]
            tag = f"{br.from_bus}_{br.to_bus}"
            for slot, ph in enumerate(br.phases):
                for t in range(T):
                    names[self.lre_pos(k, slot, t)] = f"fp_{tag}_{ph}_{t}"
                    names[self.lim_pos(k, slot, t)] = f"fq_{tag}_{ph}_{t}"
        self._names = names
        return names


@dataclass
class LinearConstraintBlock:
    """Sparse rows (COO triplets) over a shared :class:`VariableIndex`.

    ``sense`` holds b'=' for equalities and b'<' for <= rows.
    """

    index: VariableIndex
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    sense: np.ndarray
    rhs: np.ndarray
    labels: list[str] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.vals, (self.rows, self.cols)), shape=(self.n_rows, self.index.n_vars)
        )

    @staticmethod
    def concat(blocks: list["LinearConstraintBlock"]) -> "LinearConstraintBlock":
        if not blocks:
            raise ValueError("no blocks to concatenate")
        index = blocks[0].index
        offset = 0
        rows, labels = [], []
        for blk in blocks:
            if blk.index is not index:
                raise ValueError("blocks share no common variable index")
            rows.append(blk.rows + offset)
            labels.extend(blk.labels)
            offset += blk.n_rows
        return LinearConstraintBlock(
            index=index,
            rows=np.concatenate(rows),
            cols=np.concatenate([blk.cols for blk in blocks]),
            vals=np.concatenate([blk.vals for blk in blocks]),
            sense=np.concatenate([blk.sense for blk in blocks]),
            rhs=np.concatenate([blk.rhs for blk in blocks]),
            labels=labels,
        )

    def filter_rows(self, keep: np.ndarray) -> "LinearConstraintBlock":
        """Sub-block with only the rows where ``keep`` is True (renumbered)."""
        keep = np.asarray(keep, dtype=bool)
        new_id = np.cumsum(keep) - 1
        entry_keep = keep[self.rows]
        return LinearConstraintBlock(
            index=self.index,
            rows=new_id[self.rows[entry_keep]],
            cols=self.cols[entry_keep],
            vals=self.vals[entry_keep],
            sense=self.sense[keep],
            rhs=self.rhs[keep],
            labels=[lab for lab, k in zip(self.labels, keep) if k],
        )

    def dump(self, stream) -> None:
        """Plain-text listing (row label, variable, coefficient) for debugging."""
        names = self.index.column_names()
        mat = self.matrix().tocsr()
        for r in range(self.n_rows):
            terms = " + ".join(
                f"{mat.data[k]:+.6g}*{names[mat.indices[k]]}"
                for k in range(mat.indptr[r], mat.indptr[r + 1])
            )
            op = "=" if self.sense[r] == b"=" else "<="
            stream.write(f"{self.labels[r]}: {terms} {op} {self.rhs[r]:.6g}\n")


class _BlockBuilder:
    """Accumulates COO triplets with rows generated in (time, entity) order."""

    def __init__(self, index: VariableIndex):
        self.index = index
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.sense: list[bytes] = []
        self.rhs: list[np.ndarray] = []
        self.labels: list[str] = []
        self.n_rows = 0

    def add_time_rows(self, row_of_t, terms, sense: bytes, rhs, label_of_t) -> None:
        """One row per timestep: ``terms`` is a list of (col_of_t, coeff)."""
        T = self.index.horizon
        ts = np.arange(T)
        rows = np.asarray(row_of_t(ts))
        for col_of_t, coeff in terms:
            self.rows.append(rows)
            self.cols.append(np.asarray(col_of_t(ts)))
            self.vals.append(np.full(T, coeff, dtype=float))
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), (T,))
        for t in range(T):
            self.sense.append(sense)
            self.labels.append("")  # filled later by label pass
        self.rhs.append(rhs)
        self.n_rows += T
        self._pending_labels = getattr(self, "_pending_labels", [])
        self._pending_labels.append((rows, label_of_t))

    def finish(self) -> LinearConstraintBlock:
        total = self.n_rows
        labels = [""] * total
        for rows, label_of_t in getattr(self, "_pending_labels", []):
            for t, r in enumerate(rows):
                labels[r] = label_of_t(t)
        sense = np.array(self.sense, dtype="S1")
        # self.sense was appended in generation order, not row order; rebuild.
        sense_by_row = np.empty(total, dtype="S1")
        cursor = 0
        for rows, _ in getattr(self, "_pending_labels", []):
            for r in rows:
                sense_by_row[r] = sense[cursor]
                cursor += 1
        rhs_by_row = np.empty(total)
        cursor = 0
        for (rows, _), rhs in zip(getattr(self, "_pending_labels", []), self.rhs):
            rhs_by_row[rows] = rhs
            cursor += 1
        return LinearConstraintBlock(
            index=self.index,
            rows=np.concatenate(self.rows) if self.rows else np.zeros(0, dtype=np.int64),
            cols=np.concatenate(self.cols) if self.cols else np.zeros(0, dtype=np.int64),
            vals=np.concatenate(self.vals) if self.vals else np.zeros(0),
            sense=sense_by_row,
            rhs=rhs_by_row,
            labels=labels,
        )


def build_balance(feeder: Feeder, horizon: int, index: VariableIndex | None = None) -> LinearConstraintBlock:
    """Lossless per-phase power balance at every non-source bus.

    For each (bus j, phase, t): flow on the parent branch minus flows on all
    child branches minus the bus demand equals zero. Emitted as separate real
    rows for active and reactive parts, ordered (t, bus, phase, P/Q).
    """
    index = index or VariableIndex(feeder, horizon)
    fx = index.fx
    T = index.horizon
    builder = _BlockBuilder(index)

    # Enumerate (bus, phase) pairs with their parent/child branch structure.
    children: dict[int, list[int]] = {b: [] for b in range(fx.n_bus)}
    parent_branch = {}
    for k in range(fx.n_branch):
        children[fx.branch_parent[k]].append(k)
        parent_branch[fx.branch_child[k]] = k

    bus_user = {}
    for uk, att in enumerate(fx.users):
        bus_user[fx.user_bus_pos[uk]] = uk

    entries = []  # (bus, phase) in BFS bus order
    for b in range(1, fx.n_bus):
        for ph in index.bus_phases[b]:
            entries.append((b, int(ph)))
    n_bp = len(entries)

    def branch_slot(k: int, ph: int) -> int | None:
        slots = np.flatnonzero(fx.branch_phase_idx[k] == ph)
        return int(slots[0]) if slots.size else None

    for comp, (flow_pos, inj_pos) in enumerate(
        [(index.lre_pos, index.pinj_pos), (index.lim_pos, index.qinj_pos)]
    ):
        for bp, (b, ph) in enumerate(entries):
            terms = []
            pk = parent_branch[b]
            slot = branch_slot(pk, ph)
            if slot is not None:
                terms.append((lambda ts, k=pk, s=slot, f=flow_pos: f(k, s, ts), 1.0))
            for ck in children[b]:
                cslot = branch_slot(ck, ph)
                if cslot is not None:
                    terms.append((lambda ts, k=ck, s=cslot, f=flow_pos: f(k, s, ts), -1.0))
            if b in bus_user:
                uk = bus_user[b]
                att = fx.users[uk]
                uslots = np.flatnonzero(fx.user_phase_idx[uk] == ph)
                if uslots.size:
                    us = int(uslots[0])
                    terms.append((lambda ts, u=uk, s=us, f=inj_pos: f(u, s, ts), -1.0))
            tag = "p" if comp == 0 else "q"
            bid = fx.bus_order[b]
            row_base = comp * (n_bp * T)
            builder.add_time_rows(
                row_of_t=lambda ts, bp=bp, rb=row_base: rb + ts * n_bp + bp,
                terms=terms,
                sense=b"=",
                rhs=0.0,
                label_of_t=lambda t, bid=bid, ph=ph, tag=tag: f"bal_{tag}[{bid},{PHASES[ph]},{t}]",
            )
    return builder.finish()


def build_ohm(feeder: Feeder, horizon: int, index: VariableIndex | None = None) -> LinearConstraintBlock:
    """Squared-voltage drop along every branch, projected on the diagonal.

    Per (branch i->j, phase p, t):
    ``u_j - u_i + sum_q (A[p,q] Re(flow_q) - B[p,q] Im(flow_q)) = 0`` with
    ``A + iB = 2 gamma . conj(Z)`` restricted to the branch phases.
    """
    index = index or VariableIndex(feeder, horizon)
    fx = index.fx
    T = index.horizon
    builder = _BlockBuilder(index)

    entries = []
    for k in range(fx.n_branch):
        for slot, ph in enumerate(fx.branch_phase_idx[k]):
            entries.append((k, slot, int(ph)))
    n_rows_per_t = len(entries)

    for e, (k, slot, ph) in enumerate(entries):
        child, parent = fx.branch_child[k], fx.branch_parent[k]
        terms = [
            (lambda ts, b=child, s=index.u_slot(child, ph): index.u_pos(b, s, ts), 1.0),
            (lambda ts, b=parent, s=index.u_slot(parent, ph): index.u_pos(b, s, ts), -1.0),
        ]
        a_row = fx.branch_drop_a[k][slot]
        b_row = fx.branch_drop_b[k][slot]
        for q in range(len(fx.branch_phase_idx[k])):
            if a_row[q] != 0.0:
                terms.append((lambda ts, s=q: index.lre_pos(k, s, ts), float(a_row[q])))
            if b_row[q] != 0.0:
                terms.append((lambda ts, s=q: index.lim_pos(k, s, ts), -float(b_row[q])))
        br = fx.branches[k]
        builder.add_time_rows(
            row_of_t=lambda ts, e=e: ts * n_rows_per_t + e,
            terms=terms,
            sense=b"=",
            rhs=0.0,
            label_of_t=lambda t, br=br, ph=ph: f"ohm[{br.from_bus}->{br.to_bus},{PHASES[ph]},{t}]",
        )
    return builder.finish()


def polygon_geometry(k_gon: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Half-plane normals and offset factor of the inscribed regular K-gon.

    Row k is ``cos(phi_k) x + sin(phi_k) y <= R cos(pi/K)`` with
    ``phi_k = (2k+1) pi / K``; the polygon's vertices lie on the circle of
    radius R (one on the positive real axis), so every accepted flow
    satisfies the true circular limit and any flow of magnitude up to
    ``R cos(pi/K)`` is accepted.
    """
    if k_gon < 3:
        raise ValueError("k_gon must be >= 3")
    angles = (2 * np.arange(k_gon) + 1) * np.pi / k_gon
    return np.cos(angles), np.sin(angles), float(np.cos(np.pi / k_gon))


def build_limits(
    feeder: Feeder,
    horizon: int,
    tighten: BoundTightening | None = None,
    index: VariableIndex | None = None,
    k_gon: int = 8,
) -> LinearConstraintBlock:
    """Voltage-band and thermal constraints, optionally tightened.

    Voltage: ``(vmin + delta_v)^2 <= u <= vmax^2`` per non-source bus, phase
    and time (emitted as single-variable rows). Thermal: the circular limit
    ``|flow| <= rating (1 - delta_s)`` per branch phase and time, as the
    K-gon inner approximation from :func:`polygon_geometry`.
    """
    tighten = tighten or BoundTightening()
    index = index or VariableIndex(feeder, horizon)
    fx = index.fx
    T = index.horizon
    builder = _BlockBuilder(index)

    bus_entries = []
    for b in range(1, fx.n_bus):
        for ph in index.bus_phases[b]:
            bus_entries.append((b, int(ph)))
    n_v = len(bus_entries)

    for e, (b, ph) in enumerate(bus_entries):
        lo = (fx.vmin[b] + tighten.delta_v) ** 2
        hi = fx.vmax[b] ** 2
        slot = index.u_slot(b, ph)
        bid = fx.bus_order[b]
        builder.add_time_rows(
            row_of_t=lambda ts, e=e: ts * (2 * n_v) + 2 * e,
            terms=[(lambda ts, b=b, s=slot: index.u_pos(b, s, ts), -1.0)],
            sense=b"<",
            rhs=-lo,
            label_of_t=lambda t, bid=bid, ph=ph: f"vmin[{bid},{PHASES[ph]},{t}]",
        )
        builder.add_time_rows(
            row_of_t=lambda ts, e=e: ts * (2 * n_v) + 2 * e + 1,
            terms=[(lambda ts, b=b, s=slot: index.u_pos(b, s, ts), 1.0)],
            sense=b"<",
            rhs=hi,
            label_of_t=lambda t, bid=bid, ph=ph: f"vmax[{bid},{PHASES[ph]},{t}]",
        )

    cosk, sink, shrink = polygon_geometry(k_gon)
    branch_entries = []
    for k in range(fx.n_branch):
        for slot, ph in enumerate(fx.branch_phase_idx[k]):
            branch_entries.append((k, slot, int(ph)))
    n_th = len(branch_entries)
    base = 2 * n_v * T

    for e, (k, slot, ph) in enumerate(branch_entries):
        radius = fx.branch_rating[k] * (1.0 - tighten.delta_s)
        br = fx.branches[k]
        for g in range(k_gon):
            terms = []
            if cosk[g] != 0.0:
                terms.append((lambda ts, k=k, s=slot: index.lre_pos(k, s, ts), float(cosk[g])))
            if sink[g] != 0.0:
                terms.append((lambda ts, k=k, s=slot: index.lim_pos(k, s, ts), float(sink[g])))
            builder.add_time_rows(
                row_of_t=lambda ts, e=e, g=g: base + ts * (n_th * k_gon) + e * k_gon + g,
                terms=terms,
                sense=b"<",
                rhs=radius * shrink,
                label_of_t=lambda t, br=br, ph=ph, g=g: (
                    f"thermal[{br.from_bus}->{br.to_bus},{PHASES[ph]},{t},{g}]"
                ),
            )
    return builder.finish()


@dataclass
class LinearPF:
    """Solution of the linear model for fixed demands.

    ``u``: squared voltage magnitudes (n_bus, 3, T), NaN on absent phases.
    ``flows``: per-phase complex branch flows (n_branch, 3, T), zero on
    absent phases. Bus/branch axes follow :class:`FeederIndex` order.
    """

    u: np.ndarray
    flows: np.ndarray
    fx: FeederIndex


def evaluate_lin_pf(feeder: Feeder, demand_pu: np.ndarray) -> LinearPF:
    """Solve the linear equations directly by one backward/forward pass.

    ``demand_pu``: complex (n_bus, 3, T) demands in p.u. (positive =
    consumption), bus axis in :class:`FeederIndex` order.
    """
    fx = feeder_index(feeder)
    demand = np.asarray(demand_pu, dtype=complex)
    if demand.ndim == 2:
        demand = demand[:, :, np.newaxis]
    n_bus, _, T = demand.shape
    if n_bus != fx.n_bus:
        raise ValueError(f"demand has {n_bus} bus rows, feeder has {fx.n_bus}")

    flows = np.zeros((fx.n_branch, 3, T), dtype=complex)
    acc = demand.copy()
    for k in range(fx.n_branch - 1, -1, -1):
        idx = fx.branch_phase_idx[k]
        flows[k, idx] = acc[fx.branch_child[k]][idx]
        acc[fx.branch_parent[k]][idx] += flows[k, idx]

    u = np.full((fx.n_bus, 3, T), np.nan)
    u[0][np.flatnonzero(fx.bus_phase_mask[0])] = 1.0
    for k in range(fx.n_branch):
        idx = fx.branch_phase_idx[k]
        drop = fx.branch_drop_a[k] @ flows[k, idx].real - fx.branch_drop_b[k] @ flows[k, idx].imag
        u[fx.branch_child[k], idx] = u[fx.branch_parent[k], idx] - drop
    return LinearPF(u=u, flows=flows, fx=fx)


def check_linear_limits(
    feeder: Feeder,
    pf: LinearPF,
    tighten: BoundTightening | None = None,
    k_gon: int = 8,
) -> np.ndarray:
    """Per-timestep feasibility of a linear PF solution against the
    (possibly tightened) voltage band and polygonal thermal limits."""
    tighten = tighten or BoundTightening()
    fx = pf.fx
    T = pf.u.shape[2]
    ok = np.ones(T, dtype=bool)

    lo = (fx.vmin + tighten.delta_v)[:, None] ** 2
    hi = (fx.vmax[:, None]) ** 2
    mask = fx.bus_phase_mask & ~fx.is_source[:, None]
    for ph in range(3):
        rows = np.flatnonzero(mask[:, ph])
        if rows.size:
            uu = pf.u[rows, ph, :]
            ok &= np.all(uu >= lo[rows] - 1e-9, axis=0) & np.all(uu <= hi[rows] + 1e-9, axis=0)

    cosk, sink, shrink = polygon_geometry(k_gon)
    for k in range(fx.n_branch):
        radius = fx.branch_rating[k] * (1.0 - tighten.delta_s) * shrink
        lam = pf.flows[k, fx.branch_phase_idx[k], :]  # (p, T)
        proj = cosk[:, None, None] * lam.real[None] + sink[:, None, None] * lam.imag[None]
        ok &= np.all(proj <= radius + 1e-9, axis=(0, 1))
    return ok


def flow_envelopes(feeder: Feeder, demand_lo: np.ndarray, demand_hi: np.ndarray):
    """Interval bounds on every branch flow when each bus demand varies
    independently inside [demand_lo, demand_hi] (complex rectangles).

    Returns (re_lo, re_hi, im_lo, im_hi) of shape (n_branch, 3, T). Used to
    discard thermal rows that can never bind.
    """
    fx = feeder_index(feeder)
    shape = demand_lo.shape
    re_lo = np.zeros((fx.n_branch, 3, shape[2]))
    re_hi = np.zeros_like(re_lo)
    im_lo = np.zeros_like(re_lo)
    im_hi = np.zeros_like(re_lo)
    acc = [demand_lo.real.copy(), demand_hi.real.copy(), demand_lo.imag.copy(), demand_hi.imag.copy()]
    for k in range(fx.n_branch - 1, -1, -1):
        idx = fx.branch_phase_idx[k]
        child, parent = fx.branch_child[k], fx.branch_parent[k]
        re_lo[k, idx] = acc[0][child][idx]
        re_hi[k, idx] = acc[1][child][idx]
        im_lo[k, idx] = acc[2][child][idx]
        im_hi[k, idx] = acc[3][child][idx]
        for arr, src in zip(acc, (re_lo, re_hi, im_lo, im_hi)):
            arr[parent][idx] += src[k, idx]
    return re_lo, re_hi, im_lo, im_hi
