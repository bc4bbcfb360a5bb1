"""Contracts, modality presets and schedule verification logic."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feederflex.contracts import (
    Contract,
    Schedule,
    canonical_y_z,
    comfort_ok_semantic,
    count_actions,
    feasible_pattern_table,
    max_run_length,
    min_gap_between_actions,
    modality_by_name,
    preset_modalities,
    verify_schedule,
)


def make_schedule(s, y=None, z=None):
    s = np.atleast_2d(np.asarray(s, dtype=np.int8))
    if y is None or z is None:
        y, z = canonical_y_z(s)
    else:
        y = np.atleast_2d(np.asarray(y, dtype=np.int8))
        z = np.atleast_2d(np.asarray(z, dtype=np.int8))
    U, T = s.shape
    zeros = np.zeros((U, 3, T))
    return Schedule(
        users=tuple(f"u{i+1}" for i in range(U)),
        horizon=T,
        s=s,
        y=y,
        z=z,
        p_kw=zeros,
        q_kvar=zeros.copy(),
    )


# -- presets -----------------------------------------------------------------

def test_preset_catalogue_at_15_minutes():
    presets = {p.name: p for p in preset_modalities(15)}
    assert presets["simple"].eta is None and presets["simple"].alpha_steps is None
    assert presets["simple"].delta_steps == 0
    assert (presets["single"].eta, presets["single"].alpha_steps) == (1, 24)
    assert (presets["double"].eta, presets["double"].alpha_steps) == (2, 12)
    assert (presets["double_delta"].alpha_steps, presets["double_delta"].delta_steps) == (12, 12)
    assert (presets["triple_delta"].eta, presets["triple_delta"].alpha_steps,
            presets["triple_delta"].delta_steps) == (3, 8, 8)


def test_preset_rejects_step_not_dividing_durations():
    with pytest.raises(ValueError, match="integral"):
        preset_modalities(25)


def test_unknown_modality_name():
    with pytest.raises(KeyError):
        modality_by_name("weekly")


def test_contract_validation():
    with pytest.raises(ValueError):
        Contract("u1", -1.0)
    with pytest.raises(ValueError):
        Contract("u1", 1.0, alpha_steps=0)
    with pytest.raises(ValueError):
        Contract("u1", 1.0, eta=-1)
    assert Contract("u1", 2.0).is_simple
    assert not Contract("u1", 2.0, eta=1).is_simple


def test_default_reactive_threshold_uses_095_power_factor():
    c = Contract("u1", p_gtd_kw=2.0)
    assert c.q_gtd == pytest.approx(2.0 * np.tan(np.arccos(0.95)))
    assert Contract("u1", 2.0, q_gtd_kvar=0.5).q_gtd == 0.5


# -- canonical activation flags ----------------------------------------------

def test_canonical_flags_boundary_convention():
    y, z = canonical_y_z(np.array([[1, 1, 0, 1]]))
    assert y.tolist() == [[1, 0, 0, 1]]
    assert z.tolist() == [[0, 0, 1, 0]]


# -- verify_schedule ----------------------------------------------------------

def test_verify_accepts_canonical_schedule():
    sched = make_schedule([0, 1, 1, 0, 0, 1])
    contracts = [Contract("u1", 1.0, eta=2, alpha_steps=2, delta_steps=1)]
    assert verify_schedule(sched, contracts) == []


def test_verify_flags_single_duration_violation():
    sched = make_schedule([1, 1, 1])
    contracts = [Contract("u1", 1.0, alpha_steps=2)]
    problems = verify_schedule(sched, contracts)
    assert len(problems) == 1
    assert "t=2" in problems[0] and "alpha=2" in problems[0]


def test_verify_flags_simultaneous_activation_deactivation():
    sched = make_schedule([0, 0, 0], y=[0, 1, 0], z=[0, 1, 0])
    problems = verify_schedule(sched, [Contract("u1", 1.0, eta=5)])
    assert any("simultaneous" in p for p in problems)


def test_verify_flags_identity_break():
    sched = make_schedule([0, 1, 1], y=[0, 0, 0], z=[0, 0, 0])  # missing y at t=1
    problems = verify_schedule(sched, [Contract("u1", 1.0, eta=5)])
    assert any("identity" in p for p in problems)


def test_verify_flags_eta_excess():
    sched = make_schedule([1, 0, 0, 1])
    problems = verify_schedule(sched, [Contract("u1", 1.0, eta=1)])
    assert any("eta=1" in p for p in problems)


def test_verify_flags_restart_within_delta():
    # action ends at t=2 (z fires at 3); delta=2 forbids restart before t=6
    sched = make_schedule([1, 1, 1, 0, 0, 1, 0])
    problems = verify_schedule(sched, [Contract("u1", 1.0, delta_steps=2)])
    assert any("delta=2" in p for p in problems)
    ok = make_schedule([1, 1, 1, 0, 0, 0, 1])
    assert verify_schedule(ok, [Contract("u1", 1.0, delta_steps=2)]) == []


def test_verify_flags_non_binary_values():
    sched = make_schedule([0, 1])
    sched.s = sched.s.astype(float) + 0.5  # type: ignore[assignment]
    problems = verify_schedule(sched, [Contract("u1", 1.0)])
    assert any("non-binary" in p for p in problems)


# -- window formulation vs run-length semantics -------------------------------

def test_alpha_window_examples():
    c = Contract("u1", 1.0, alpha_steps=2)
    table = feasible_pattern_table(c, 4)
    def mask(bits):
        return sum(b << i for i, b in enumerate(bits))
    assert not table[mask([1, 1, 1, 0])]
    assert table[mask([1, 1, 0, 1])]


def test_delta_window_examples():
    c = Contract("u1", 1.0, delta_steps=2)
    table = feasible_pattern_table(c, 7)
    def mask(bits):
        return sum(b << i for i, b in enumerate(bits))
    # deactivation at t=3: restart allowed at t=6, not earlier
    assert table[mask([1, 1, 1, 0, 0, 0, 1])]
    assert not table[mask([1, 1, 1, 0, 0, 1, 0])]


def test_eta_pattern_example():
    c = Contract("u1", 1.0, eta=1)
    table = feasible_pattern_table(c, 4)
    assert not table[0b1001]  # two separate actions
    assert table[0b0110]


@given(st.integers(min_value=0, max_value=2**10 - 1), st.data())
@settings(max_examples=500, deadline=None)
def test_window_formulation_matches_run_length_semantics(mask, data):
    T = 10
    eta = data.draw(st.one_of(st.none(), st.integers(0, 3)))
    alpha = data.draw(st.one_of(st.none(), st.integers(1, 5)))
    delta = data.draw(st.integers(0, 4))
    c = Contract("u1", 1.0, eta=eta, alpha_steps=alpha, delta_steps=delta)
    s = np.array([(mask >> t) & 1 for t in range(T)], dtype=np.int8)
    assert bool(feasible_pattern_table(c, T)[mask]) == comfort_ok_semantic(s, c)


@given(st.integers(min_value=0, max_value=2**12 - 1), st.data())
@settings(max_examples=300, deadline=None)
def test_verify_agrees_with_pattern_table(mask, data):
    T = 12
    eta = data.draw(st.one_of(st.none(), st.integers(0, 3)))
    alpha = data.draw(st.one_of(st.none(), st.integers(1, 6)))
    delta = data.draw(st.integers(0, 5))
    c = Contract("u1", 1.0, eta=eta, alpha_steps=alpha, delta_steps=delta)
    s = np.array([[(mask >> t) & 1 for t in range(T)]], dtype=np.int8)
    sched = make_schedule(s[0])
    assert (verify_schedule(sched, [c]) == []) == bool(feasible_pattern_table(c, T)[mask])


def test_run_length_helpers():
    s = np.array([1, 1, 0, 1, 0, 0, 1, 1, 1])
    assert max_run_length(s) == 3
    assert count_actions(s) == 3
    assert min_gap_between_actions(s) == 1
