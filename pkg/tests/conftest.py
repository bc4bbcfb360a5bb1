"""Shared instance factories for the scheduler tests."""

import math

import numpy as np
import pytest

from feederflex.contracts import Contract, preset_modalities
from feederflex.linearflow import evaluate_lin_pf
from feederflex.network import Branch, Bus, Feeder, UserAttachment
from feederflex.scenarios import ProfileSet, forecast_demand_pu


def build_tiny_instance(seed: int):
    """Randomized instance with <= 4 users x <= 5 timesteps and limits drawn
    around the forecast operating point, so the mix spans uncongested,
    congested-but-solvable and outright infeasible cases."""
    rng = np.random.default_rng(seed)
    n_users = int(rng.integers(1, 5))
    horizon = int(rng.integers(2, 6))
    shared_trunk = bool(rng.random() < 0.6)

    buses = [Bus("src", "abc", is_source=True)]
    branches = []
    users = []
    parent = "src"
    if shared_trunk:
        buses.append(Bus("j1", "abc"))
        r = rng.uniform(0.01, 0.05)
        z = np.full((3, 3), 0.2j * r) + np.diag([r * (1 + 0.4j)] * 3)
        branches.append(Branch("src", "j1", "abc", z, 1.0))
        parent = "j1"
    for k in range(n_users):
        bid = f"h{k+1}"
        uid = f"u{k+1}"
        three_phase = rng.random() < 0.2
        phases = ("a", "b", "c") if three_phase else (("a", "b", "c")[int(rng.integers(3))],)
        buses.append(Bus(bid, phases))
        r = rng.uniform(0.01, 0.06)
        m = len(phases)
        z = np.diag([r * (1 + 0.35j)] * m).astype(complex)
        if m == 3:
            z += (np.ones((3, 3)) - np.eye(3)) * 0.15j * r
        branches.append(Branch(parent, bid, phases, z, 1.0))
        users.append(UserAttachment(uid, bid, phases))
    feeder = Feeder(buses=tuple(buses), branches=tuple(branches), users=tuple(users))

    p = np.zeros((n_users, 3, horizon))
    for k, att in enumerate(users):
        for ph in att.phases:
            idx = {"a": 0, "b": 1, "c": 2}[ph]
            p[k, idx] = rng.uniform(0.4, 4.5, horizon) / len(att.phases)
    q = p * math.tan(math.acos(0.95))
    profiles = ProfileSet(
        users=tuple(u.user_id for u in users), horizon=horizon, step_minutes=15, p_fx=p, q_fx=q
    )

    # Draw limits around the forecast operating point.
    pf = evaluate_lin_pf(feeder, forecast_demand_pu(feeder, profiles))
    max_flow = max(float(np.abs(pf.flows).max()), 1e-3)
    u_min = float(np.nanmin(pf.u))
    rating = max_flow * rng.uniform(0.55, 1.1)
    vmin = float(np.clip(math.sqrt(max(u_min, 0.25)) + rng.uniform(-0.04, 0.015), 0.5, 1.05))
    feeder = Feeder(
        buses=tuple(
            Bus(b.id, b.phases, vmin_pu=vmin, vmax_pu=1.1, is_source=b.is_source)
            for b in feeder.buses
        ),
        branches=tuple(
            Branch(br.from_bus, br.to_bus, br.phases, br.z_matrix, rating)
            for br in feeder.branches
        ),
        users=feeder.users,
    )

    preset = preset_modalities(15)[seed % 5]
    contracts = [
        Contract(
            u.user_id,
            p_gtd_kw=float(rng.uniform(0.4, 2.5)),
            eta=preset.eta,
            alpha_steps=preset.alpha_steps,
            delta_steps=preset.delta_steps,
        )
        for u in users
    ]
    return feeder, profiles, contracts, preset


@pytest.fixture
def tiny_instance_factory():
    return build_tiny_instance
