"""Demand-reduction contracts, modality presets and schedule verification.

A contract caps a user's demand at a guaranteed threshold whenever a
reduction action is active, and limits how often (eta), how long
(alpha_steps) and how densely (delta_steps) actions may occur. Unlimited
parameters are represented by ``None``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import default_q_from_p

DEFAULT_POWER_FACTOR = 0.95


@dataclass(frozen=True)
class Contract:
    """Reduction contract of one user.

    ``eta``: max number of reduction actions over the horizon (None =
    unlimited). ``alpha_steps``: max action duration in timesteps (None =
    unlimited). ``delta_steps``: minimum number of idle steps enforced after
    a deactivation before the next action may start.
    """

    user_id: str
    p_gtd_kw: float
    q_gtd_kvar: float | None = None
    eta: int | None = None
    alpha_steps: int | None = None
    delta_steps: int = 0

    def __post_init__(self):
        if self.p_gtd_kw < 0:
            raise ValueError("p_gtd_kw must be >= 0")
        if self.eta is not None and self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.alpha_steps is not None and self.alpha_steps < 1:
            raise ValueError("alpha_steps must be >= 1 when finite")
        if self.delta_steps < 0:
            raise ValueError("delta_steps must be >= 0")

    @property
    def q_gtd(self) -> float:
        if self.q_gtd_kvar is not None:
            return self.q_gtd_kvar
        return float(default_q_from_p(self.p_gtd_kw, DEFAULT_POWER_FACTOR))

    @property
    def is_simple(self) -> bool:
        """True when no comfort parameter can ever bind (s-only model)."""
        return self.eta is None and self.alpha_steps is None and self.delta_steps == 0


@dataclass(frozen=True)
class ModalityPreset:
    """Named (eta, alpha, delta) combination from the standard catalogue."""

    name: str
    eta: int | None
    alpha_steps: int | None
    delta_steps: int


#: Catalogue of standard contract modalities, durations in hours.
PRESET_HOURS: dict[str, tuple[int | None, float | None, float]] = {
    "simple": (None, None, 0.0),
    "single": (1, 6.0, 0.0),
    "double": (2, 3.0, 0.0),
    "double_delta": (2, 3.0, 3.0),
    "triple_delta": (3, 2.0, 2.0),
}

PRESET_ORDER = ("simple", "single", "double", "double_delta", "triple_delta")


def _hours_to_steps(hours: float | None, step_minutes: int) -> int | None:
    if hours is None:
        return None
    total = hours * 60.0
    steps = total / step_minutes
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError(f"{hours} h is not an integral number of {step_minutes}-minute steps")
    return int(round(steps))


def preset_modalities(step_minutes: int = 15) -> list[ModalityPreset]:
    """The five named presets with durations converted to timesteps."""
    if step_minutes <= 0:
        raise ValueError("step_minutes must be positive")
    out = []
    for name in PRESET_ORDER:
        eta, alpha_h, delta_h = PRESET_HOURS[name]
        out.append(
            ModalityPreset(
                name=name,
                eta=eta,
                alpha_steps=_hours_to_steps(alpha_h, step_minutes),
                delta_steps=_hours_to_steps(delta_h, step_minutes) or 0,
            )
        )
    return out


def modality_by_name(name: str, step_minutes: int = 15) -> ModalityPreset:
    for preset in preset_modalities(step_minutes):
        if preset.name == name:
            return preset
    raise KeyError(f"unknown modality {name!r}; known: {', '.join(PRESET_ORDER)}")


def contracts_for(feeder, preset: ModalityPreset, p_gtd_kw: float, q_gtd_kvar: float | None = None) -> list[Contract]:
    """Uniform contracts for every user of a feeder under one preset."""
    return [
        Contract(
            user_id=u.user_id,
            p_gtd_kw=p_gtd_kw,
            q_gtd_kvar=q_gtd_kvar,
            eta=preset.eta,
            alpha_steps=preset.alpha_steps,
            delta_steps=preset.delta_steps,
        )
        for u in feeder.sorted_users()
    ]


@dataclass
class Schedule:
    """Binary reduction trajectories plus the demand they realize.

    ``s/y/z``: (n_users, T) int8 arrays (status, activation, deactivation).
    ``p_kw/q_kvar``: realized per-phase demand (n_users, 3, T). The user axis
    is sorted by user id.
    """

    users: tuple[str, ...]
    horizon: int
    s: np.ndarray
    y: np.ndarray
    z: np.ndarray
    p_kw: np.ndarray
    q_kvar: np.ndarray

    @property
    def objective(self) -> int:
        return int(self.s.sum())

    @property
    def participants(self) -> list[str]:
        return [uid for k, uid in enumerate(self.users) if self.s[k].any()]

    def to_json(self) -> dict:
        return {
            "users": list(self.users),
            "horizon": self.horizon,
            "objective": self.objective,
            "s": self.s.astype(int).tolist(),
            "y": self.y.astype(int).tolist(),
            "z": self.z.astype(int).tolist(),
            "p_kw": self.p_kw.tolist(),
            "q_kvar": self.q_kvar.tolist(),
        }

    @staticmethod
    def from_json(doc: dict) -> "Schedule":
        return Schedule(
            users=tuple(doc["users"]),
            horizon=int(doc["horizon"]),
            s=np.asarray(doc["s"], dtype=np.int8),
            y=np.asarray(doc["y"], dtype=np.int8),
            z=np.asarray(doc["z"], dtype=np.int8),
            p_kw=np.asarray(doc["p_kw"], dtype=float),
            q_kvar=np.asarray(doc["q_kvar"], dtype=float),
        )


def canonical_y_z(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation/deactivation flags implied by a status trajectory.

    Boundary convention: nothing is active before t=0, so y_0 = s_0 and
    z_0 = 0.
    """
    s = np.asarray(s, dtype=np.int8)
    if s.ndim == 1:
        s = s[np.newaxis, :]
    prev = np.concatenate([np.zeros((s.shape[0], 1), dtype=np.int8), s[:, :-1]], axis=1)
    diff = s - prev
    y = np.where(diff > 0, 1, 0).astype(np.int8)
    z = np.where(diff < 0, 1, 0).astype(np.int8)
    return y, z


def window_start(t: int, x: int) -> int:
    """First timestep of the length-(x+1) look-back window ending at t."""
    return max(0, t - x)


def verify_schedule(schedule: Schedule, contracts: list[Contract], horizon: int | None = None) -> list[str]:
    """Re-check the status/activation identity and every comfort guarantee.

    Returns one message per violated constraint instance; empty means the
    schedule honours all contracts.
    """
    horizon = horizon if horizon is not None else schedule.horizon
    by_user = {c.user_id: c for c in contracts}
    problems: list[str] = []
    s, y, z = schedule.s, schedule.y, schedule.z

    for arr, name in ((s, "s"), (y, "y"), (z, "z")):
        if not np.isin(arr, (0, 1)).all():
            problems.append(f"{name} contains non-binary values")
        if arr.shape != (len(schedule.users), horizon):
            problems.append(f"{name} has shape {arr.shape}, expected ({len(schedule.users)},{horizon})")
    if problems:
        return problems

    for k, uid in enumerate(schedule.users):
        c = by_user.get(uid)
        if c is None:
            problems.append(f"user {uid}: no contract")
            continue
        su, yu, zu = s[k], y[k], z[k]

        if yu[0] != su[0]:
            problems.append(f"user {uid}, t=0: activation flag mismatch (y0={yu[0]}, s0={su[0]})")
        if zu[0] != 0:
            problems.append(f"user {uid}, t=0: deactivation before the horizon start")
        for t in range(1, horizon):
            # Status steps up with an activation, down with a deactivation.
            if su[t] - su[t - 1] != yu[t] - zu[t]:
                problems.append(f"user {uid}, t={t}: status/activation identity violated")
        both = np.flatnonzero((yu == 1) & (zu == 1))
        for t in both:
            problems.append(
                f"user {uid}, t={t}: identity violated (simultaneous activation and deactivation)"
            )

        if c.eta is not None and int(yu.sum()) > c.eta:
            problems.append(f"user {uid}: {int(yu.sum())} activations exceed eta={c.eta}")
        if c.alpha_steps is not None:
            a = c.alpha_steps
            for t in range(horizon):
                w = int(su[window_start(t, a) : t + 1].sum())
                if w > a:
                    problems.append(f"user {uid}, t={t}: duration window sum {w} exceeds alpha={a}")
        d = c.delta_steps
        for t in range(horizon):
            w = int(zu[window_start(t, d) : t + 1].sum())
            if w > 1 - int(su[t]):
                problems.append(f"user {uid}, t={t}: restart within delta={d} of a deactivation")
    return problems


def feasible_pattern_table(contract: Contract, horizon: int) -> np.ndarray:
    """Comfort feasibility of every status bitmask of length ``horizon``.

    Entry m is True iff the trajectory with s_t = bit t of m (canonical y/z
    derivation) satisfies the contract. Used by the exhaustive oracle.
    """
    if horizon > 24:
        raise ValueError("pattern table limited to horizons <= 24")
    n = 1 << horizon
    masks = np.arange(n, dtype=np.uint32)
    s = ((masks[:, None] >> np.arange(horizon, dtype=np.uint32)) & 1).astype(np.int8)
    prev = np.concatenate([np.zeros((n, 1), dtype=np.int8), s[:, :-1]], axis=1)
    diff = s - prev
    y = (diff > 0).astype(np.int8)
    z = (diff < 0).astype(np.int8)

    ok = np.ones(n, dtype=bool)
    if contract.eta is not None:
        ok &= y.sum(axis=1) <= contract.eta
    if contract.alpha_steps is not None:
        a = contract.alpha_steps
        cs = np.concatenate([np.zeros((n, 1), dtype=np.int32), np.cumsum(s, axis=1, dtype=np.int32)], axis=1)
        for t in range(horizon):
            t0 = window_start(t, a)
            ok &= (cs[:, t + 1] - cs[:, t0]) <= a
    d = contract.delta_steps
    if d > 0:
        cz = np.concatenate([np.zeros((n, 1), dtype=np.int32), np.cumsum(z, axis=1, dtype=np.int32)], axis=1)
        for t in range(horizon):
            t0 = window_start(t, d)
            ok &= (cz[:, t + 1] - cz[:, t0]) <= 1 - s[:, t]
    return ok


def max_run_length(s: np.ndarray) -> int:
    """Longest contiguous block of ones in a 1-D binary array."""
    best = run = 0
    for v in np.asarray(s).ravel():
        run = run + 1 if v else 0
        best = max(best, run)
    return best


def count_actions(s: np.ndarray) -> int:
    """Number of maximal contiguous reduction blocks."""
    s = np.asarray(s).ravel()
    prev = np.concatenate([[0], s[:-1]])
    return int(((s == 1) & (prev == 0)).sum())


def min_gap_between_actions(s: np.ndarray) -> int:
    """Smallest idle gap (in steps) between consecutive reduction blocks.

    Returns a large sentinel (horizon) when fewer than two blocks exist.
    """
    s = np.asarray(s).ravel()
    edges_up = np.flatnonzero(np.diff(np.concatenate([[0], s])) == 1)
    edges_dn = np.flatnonzero(np.diff(np.concatenate([s, [0]])) == -1)
    if len(edges_up) < 2:
        return len(s)
    gaps = edges_up[1:] - (edges_dn[:-1] + 1)
    return int(gaps.min())


def comfort_ok_semantic(s: np.ndarray, contract: Contract) -> bool:
    """Run-length semantics of the comfort guarantees (independent of the
    window formulation): action count <= eta, longest action <= alpha,
    idle gap between actions > delta."""
    s = np.asarray(s).ravel()
    if contract.eta is not None and count_actions(s) > contract.eta:
        return False
    if contract.alpha_steps is not None and max_run_length(s) > contract.alpha_steps:
        return False
    if contract.delta_steps > 0 and count_actions(s) >= 2:
        if min_gap_between_actions(s) <= contract.delta_steps:
            return False
    return True
