"""Unbalanced radial feeder model: buses, branches, users, electrical limits.

All electrical data is stored in per-unit on a single-phase base
(``base_voltage_v`` is the line-to-neutral voltage, ``base_power_va`` the
per-phase power base). Feeders are immutable after construction; every
operation in this module is a pure function.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

PHASES = ("a", "b", "c")
PHASE_INDEX = {"a": 0, "b": 1, "c": 2}

#: Source-bus voltage phasors (1.0 p.u., a: 0 deg, b: -120 deg, c: +120 deg).
SOURCE_ROTATION = np.array(
    [1.0, np.exp(-2j * np.pi / 3), np.exp(2j * np.pi / 3)], dtype=complex
)


class NetworkError(ValueError):
    """Raised for structurally unusable feeders (e.g. non-radial graphs)."""


def _phase_tuple(phases) -> tuple[str, ...]:
    """Normalize a phase spec ('ab', ['b','a'], ('a',)) to a sorted tuple."""
    if isinstance(phases, str):
        items = list(phases)
    else:
        items = list(phases)
    out = tuple(sorted(dict.fromkeys(items), key=lambda p: PHASE_INDEX.get(p, 99)))
    return out


@dataclass(frozen=True)
class Bus:
    """A feeder bus.

    Attributes:
        id: Unique bus identifier.
        phases: Phases present at the bus, subset of ('a','b','c').
        vmin_pu: Lower voltage-magnitude limit [p.u.].
        vmax_pu: Upper voltage-magnitude limit [p.u.].
        is_source: True for the feeder head (slack) bus.
    """

    id: str
    phases: tuple[str, ...]
    vmin_pu: float = 0.9
    vmax_pu: float = 1.1
    is_source: bool = False

    def __post_init__(self):
        object.__setattr__(self, "phases", _phase_tuple(self.phases))


@dataclass(frozen=True, eq=False)
class Branch:
    """A distribution line section between two buses.

    ``z_matrix`` is the complex series impedance over the branch phases
    (p.u., row/column order follows ``phases``). ``s_rated_pu`` is the
    per-phase apparent-power rating.
    """

    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    z_matrix: np.ndarray
    s_rated_pu: float

    def __post_init__(self):
        object.__setattr__(self, "phases", _phase_tuple(self.phases))
        z = np.array(self.z_matrix, dtype=complex)
        if z.ndim == 0:
            z = z.reshape(1, 1)
        elif z.ndim == 1:
            z = np.diag(z)
        z.setflags(write=False)
        object.__setattr__(self, "z_matrix", z)

    @property
    def key(self) -> tuple[str, str]:
        return (self.from_bus, self.to_bus)


@dataclass(frozen=True)
class UserAttachment:
    """Maps a contracted user onto a bus and the phases of its connection."""

    user_id: str
    bus_id: str
    phases: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "phases", _phase_tuple(self.phases))


@dataclass(frozen=True, eq=False)
class Feeder:
    """A radial low-voltage feeder: one source bus plus a tree of branches."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    users: tuple[UserAttachment, ...]
    base_voltage_v: float = 230.0
    base_power_va: float = 10_000.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "users", tuple(self.users))

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    @property
    def source_bus(self) -> Bus:
        sources = [b for b in self.buses if b.is_source]
        if len(sources) != 1:
            raise NetworkError(f"feeder has {len(sources)} source buses, expected 1")
        return sources[0]

    def sorted_users(self) -> tuple[UserAttachment, ...]:
        return tuple(sorted(self.users, key=lambda u: u.user_id))


@dataclass
class ValidationReport:
    """Accumulated structural problems; empty means the feeder is valid."""

    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def add(self, message: str) -> None:
        self.problems.append(message)

    def __iter__(self):
        return iter(self.problems)


def validate_feeder(feeder: Feeder) -> ValidationReport:
    """Check every structural invariant; report violations, never raise.

    Covered: unique bus ids, exactly one source, valid voltage bands,
    impedance symmetry and positive diagonal resistance, positive ratings,
    branch-phase containment, radiality (tree rooted at the source), user
    injectivity and phase containment.
    """
    report = ValidationReport()
    bus_ids = [b.id for b in feeder.buses]
    if len(set(bus_ids)) != len(bus_ids):
        report.add("duplicate bus ids")
    bus_by_id = {b.id: b for b in feeder.buses}

    sources = [b for b in feeder.buses if b.is_source]
    if len(sources) != 1:
        report.add(f"expected exactly one source bus, found {len(sources)}")

    for b in feeder.buses:
        if not b.phases:
            report.add(f"bus {b.id}: empty phase set")
        if not set(b.phases) <= set(PHASES):
            report.add(f"bus {b.id}: unknown phase labels {b.phases}")
        if not (0.0 < b.vmin_pu < b.vmax_pu):
            report.add(f"bus {b.id}: invalid voltage band [{b.vmin_pu}, {b.vmax_pu}]")

    for br in feeder.branches:
        tag = f"branch {br.from_bus}->{br.to_bus}"
        for end in (br.from_bus, br.to_bus):
            if end not in bus_by_id:
                report.add(f"{tag}: unknown endpoint {end}")
        n = len(br.phases)
        if br.z_matrix.shape != (n, n):
            report.add(f"{tag}: impedance shape {br.z_matrix.shape} != ({n},{n})")
        else:
            if not np.allclose(br.z_matrix, br.z_matrix.T, atol=1e-12):
                report.add(f"{tag}: impedance asymmetry")
            if np.any(br.z_matrix.diagonal().real <= 0.0):
                report.add(f"{tag}: non-positive diagonal resistance")
        if br.s_rated_pu <= 0.0:
            report.add(f"{tag}: non-positive rating")
        for end in (br.from_bus, br.to_bus):
            if end in bus_by_id and not set(br.phases) <= set(bus_by_id[end].phases):
                report.add(f"{tag}: phase mismatch with bus {end}")

    # Radiality: connected, acyclic, rooted at the source.
    if len(sources) == 1:
        adjacency: dict[str, list[str]] = {bid: [] for bid in bus_by_id}
        edge_count = 0
        for br in feeder.branches:
            if br.from_bus in adjacency and br.to_bus in adjacency:
                adjacency[br.from_bus].append(br.to_bus)
                adjacency[br.to_bus].append(br.from_bus)
                edge_count += 1
        seen = {sources[0].id}
        queue = deque([sources[0].id])
        while queue:
            node = queue.popleft()
            for nxt in adjacency[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        unreachable = set(bus_by_id) - seen
        if unreachable or edge_count != len(bus_by_id) - 1:
            report.add(
                "non-radial: branch graph is not a tree rooted at the source"
                + (f" (unreachable: {sorted(unreachable)})" if unreachable else "")
            )

    # Users: injective user -> bus map, phases contained in the bus.
    used_buses: dict[str, str] = {}
    user_ids = [u.user_id for u in feeder.users]
    if len(set(user_ids)) != len(user_ids):
        report.add("duplicate user ids")
    for u in feeder.users:
        if u.bus_id not in bus_by_id:
            report.add(f"user {u.user_id}: unknown bus {u.bus_id}")
            continue
        if u.bus_id in used_buses:
            report.add(
                f"injective mapping violated: users {used_buses[u.bus_id]} and "
                f"{u.user_id} share bus {u.bus_id}"
            )
        used_buses[u.bus_id] = u.user_id
        if not set(u.phases) <= set(bus_by_id[u.bus_id].phases):
            report.add(f"user {u.user_id}: phases {u.phases} not present at bus {u.bus_id}")
        if not u.phases:
            report.add(f"user {u.user_id}: empty phase set")
    return report


def radial_ordering(feeder: Feeder) -> list[tuple[str, Branch | None]]:
    """Breadth-first bus order from the source with each bus's parent branch.

    Deterministic: children are visited in ascending bus-id order. Raises
    :class:`NetworkError` on non-radial input.
    """
    source = feeder.source_bus
    by_endpoint: dict[str, list[Branch]] = {}
    for br in feeder.branches:
        by_endpoint.setdefault(br.from_bus, []).append(br)
        by_endpoint.setdefault(br.to_bus, []).append(br)

    order: list[tuple[str, Branch | None]] = [(source.id, None)]
    seen = {source.id}
    queue = deque([source.id])
    while queue:
        node = queue.popleft()
        children = []
        for br in by_endpoint.get(node, []):
            other = br.to_bus if br.from_bus == node else br.from_bus
            if other not in seen:
                children.append((other, br))
        for other, br in sorted(children, key=lambda c: c[0]):
            seen.add(other)
            order.append((other, br))
            queue.append(other)

    if len(order) != len(feeder.buses) or len(feeder.branches) != len(feeder.buses) - 1:
        raise NetworkError("non-radial feeder: cannot build a tree ordering")
    return order


def per_unit_convert(
    feeder: Feeder,
    z_ohm: dict[tuple[str, str], np.ndarray],
    s_rated_kva: dict[tuple[str, str], float],
) -> Feeder:
    """Replace branch data given in ohms / kVA by per-unit values.

    ``z_pu = z_ohm * base_power_va / base_voltage_v**2`` and
    ``s_pu = s_kva * 1000 / base_power_va``. Rejects non-positive bases and
    non-positive diagonal resistances.
    """
    if feeder.base_voltage_v <= 0 or feeder.base_power_va <= 0:
        raise ValueError("per-unit bases must be positive")
    z_base = feeder.base_voltage_v**2 / feeder.base_power_va
    new_branches = []
    for br in feeder.branches:
        z = np.asarray(z_ohm[br.key], dtype=complex)
        if z.ndim == 0:
            z = z.reshape(1, 1)
        elif z.ndim == 1:
            z = np.diag(z)
        if np.any(z.diagonal().real <= 0.0):
            raise ValueError(f"branch {br.key}: resistance must be positive")
        rating = s_rated_kva[br.key]
        new_branches.append(
            replace(br, z_matrix=z / z_base, s_rated_pu=rating * 1000.0 / feeder.base_power_va)
        )
    return replace(feeder, branches=tuple(new_branches))


def per_unit_to_ohms(feeder: Feeder):
    """Inverse of :func:`per_unit_convert`: recover ohm / kVA branch data."""
    z_base = feeder.base_voltage_v**2 / feeder.base_power_va
    z_ohm = {br.key: br.z_matrix * z_base for br in feeder.branches}
    s_kva = {br.key: br.s_rated_pu * feeder.base_power_va / 1000.0 for br in feeder.branches}
    return z_ohm, s_kva


def replace_limits(
    feeder: Feeder,
    vmin_pu: float | None = None,
    vmax_pu: float | None = None,
    rating_scale: float = 1.0,
) -> Feeder:
    """Return a copy with the voltage band and/or branch ratings adjusted."""
    buses = tuple(
        replace(
            b,
            vmin_pu=b.vmin_pu if (vmin_pu is None or b.is_source) else vmin_pu,
            vmax_pu=b.vmax_pu if (vmax_pu is None or b.is_source) else vmax_pu,
        )
        for b in feeder.buses
    )
    branches = tuple(replace(br, s_rated_pu=br.s_rated_pu * rating_scale) for br in feeder.branches)
    return replace(feeder, buses=buses, branches=branches)


class FeederIndex:
    """Precomputed array view of a feeder for the power-flow kernels.

    Branches are held in breadth-first (parent-before-child) order. Phase
    subsets are encoded as integer index arrays into the (a, b, c) axis.
    """

    def __init__(self, feeder: Feeder):
        self.feeder = feeder
        order = radial_ordering(feeder)
        self.bus_order = [bid for bid, _ in order]
        self.bus_pos = {bid: k for k, (bid, _) in enumerate(order)}
        self.n_bus = len(order)

        bus_by_id = {b.id: b for b in feeder.buses}
        self.bus_phase_mask = np.zeros((self.n_bus, 3), dtype=bool)
        self.vmin = np.zeros(self.n_bus)
        self.vmax = np.zeros(self.n_bus)
        self.is_source = np.zeros(self.n_bus, dtype=bool)
        for bid, pos in self.bus_pos.items():
            b = bus_by_id[bid]
            for p in b.phases:
                self.bus_phase_mask[pos, PHASE_INDEX[p]] = True
            self.vmin[pos] = b.vmin_pu
            self.vmax[pos] = b.vmax_pu
            self.is_source[pos] = b.is_source

        # Branch arrays in BFS order; orient every branch parent -> child.
        self.branches: list[Branch] = []
        self.branch_parent = []
        self.branch_child = []
        self.branch_phase_idx: list[np.ndarray] = []
        self.branch_z: list[np.ndarray] = []
        self.branch_rating = []
        for bid, br in order[1:]:
            child = self.bus_pos[bid]
            parent = self.bus_pos[br.from_bus if br.to_bus == bid else br.to_bus]
            self.branches.append(br)
            self.branch_parent.append(parent)
            self.branch_child.append(child)
            self.branch_phase_idx.append(
                np.array([PHASE_INDEX[p] for p in br.phases], dtype=np.intp)
            )
            self.branch_z.append(np.asarray(br.z_matrix, dtype=complex))
            self.branch_rating.append(br.s_rated_pu)
        self.n_branch = len(self.branches)
        self.branch_rating = np.array(self.branch_rating) if self.branches else np.zeros(0)

        # Voltage-drop coefficients for the linearized model:
        # drop_p = sum_q (A[p,q] * Re(flow_q) - B[p,q] * Im(flow_q)).
        from .linearflow import gamma_matrix  # local import avoids a cycle

        gamma = gamma_matrix()
        self.branch_drop_a: list[np.ndarray] = []
        self.branch_drop_b: list[np.ndarray] = []
        for idx, z in zip(self.branch_phase_idx, self.branch_z):
            coeff = 2.0 * gamma[np.ix_(idx, idx)] * np.conj(z)
            self.branch_drop_a.append(coeff.real.copy())
            self.branch_drop_b.append(coeff.imag.copy())

        self.users = list(feeder.sorted_users())
        self.user_pos = {u.user_id: k for k, u in enumerate(self.users)}
        self.user_bus_pos = np.array([self.bus_pos[u.bus_id] for u in self.users], dtype=np.intp)
        self.user_phase_idx = [
            np.array([PHASE_INDEX[p] for p in u.phases], dtype=np.intp) for u in self.users
        ]


@lru_cache(maxsize=64)
def _cached_index(feeder: Feeder) -> FeederIndex:
    return FeederIndex(feeder)


def feeder_index(feeder: Feeder) -> FeederIndex:
    """Shared :class:`FeederIndex` for a feeder (cached per instance)."""
    return _cached_index(feeder)


# ---------------------------------------------------------------------------
# JSON file format
# ---------------------------------------------------------------------------

def feeder_to_json(feeder: Feeder) -> dict:
    """Serialize to the on-disk schema (impedances back in ohms, kVA ratings)."""
    z_ohm, s_kva = per_unit_to_ohms(feeder)
    return {
        "base": {"voltage_v": feeder.base_voltage_v, "power_va": feeder.base_power_va},
        "buses": [
            {
                "id": b.id,
                "phases": list(b.phases),
                "vmin_pu": b.vmin_pu,
                "vmax_pu": b.vmax_pu,
                "source": b.is_source,
            }
            for b in feeder.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "phases": list(br.phases),
                "r": z_ohm[br.key].real.tolist(),
                "x": z_ohm[br.key].imag.tolist(),
                "s_rated_kva": s_kva[br.key],
            }
            for br in feeder.branches
        ],
        "users": [
            {"id": u.user_id, "bus": u.bus_id, "phases": list(u.phases)} for u in feeder.users
        ],
    }


def _matrix_from_json(value, n: int) -> np.ndarray:
    """Accept scalar (uniform diagonal), vector (diagonal) or full matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.eye(n) * float(arr)
    if arr.ndim == 1:
        if arr.size != n:
            raise ValueError(f"diagonal of length {arr.size}, expected {n}")
        return np.diag(arr)
    if arr.shape != (n, n):
        raise ValueError(f"matrix shape {arr.shape}, expected ({n},{n})")
    return arr


def feeder_from_json(doc: dict) -> Feeder:
    """Build a per-unit feeder from the JSON schema (r/x in ohms, kVA ratings)."""
    base = doc["base"]
    buses = tuple(
        Bus(
            id=str(b["id"]),
            phases=_phase_tuple(b["phases"]),
            vmin_pu=float(b.get("vmin_pu", 0.9)),
            vmax_pu=float(b.get("vmax_pu", 1.1)),
            is_source=bool(b.get("source", False)),
        )
        for b in doc["buses"]
    )
    branches = []
    z_ohm: dict[tuple[str, str], np.ndarray] = {}
    s_kva: dict[tuple[str, str], float] = {}
    for br in doc["branches"]:
        phases = _phase_tuple(br["phases"])
        n = len(phases)
        r = _matrix_from_json(br["r"], n)
        x = _matrix_from_json(br["x"], n)
        key = (str(br["from"]), str(br["to"]))
        z_ohm[key] = r + 1j * x
        s_kva[key] = float(br["s_rated_kva"])
        branches.append(
            Branch(
                from_bus=key[0],
                to_bus=key[1],
                phases=phases,
                z_matrix=np.eye(n, dtype=complex),  # placeholder, replaced below
                s_rated_pu=1.0,
            )
        )
    users = tuple(
        UserAttachment(user_id=str(u["id"]), bus_id=str(u["bus"]), phases=_phase_tuple(u["phases"]))
        for u in doc["users"]
    )
    feeder = Feeder(
        buses=buses,
        branches=tuple(branches),
        users=users,
        base_voltage_v=float(base["voltage_v"]),
        base_power_va=float(base["power_va"]),
    )
    return per_unit_convert(feeder, z_ohm, s_kva)


def save_feeder(feeder: Feeder, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feeder_to_json(feeder), indent=1, sort_keys=True))


def load_feeder(path: str | Path) -> Feeder:
    return feeder_from_json(json.loads(Path(path).read_text()))


def default_q_from_p(p_kw: float | np.ndarray, power_factor: float = 0.95):
    """Reactive power implied by an active power at a lagging power factor."""
    return p_kw * math.tan(math.acos(power_factor))
