"""Scheduling model assembly, LP relaxation, branch-and-bound, oracle."""

import math

import numpy as np
import pytest

from feederflex.contracts import Contract, verify_schedule
from feederflex.linearflow import BoundTightening
from feederflex.milp import (
    SolveOptions,
    brute_force_schedule,
    build_milp,
    comfort_rows,
    export_lp,
    load_assignment,
    lp_relax_solve,
    relative_objective_error,
    schedule_from_assignment,
    solve_milp,
    user_response_rows,
    verify_model_solution,
)
from feederflex.linearflow import VariableIndex
from feederflex.network import Branch, Bus, Feeder, UserAttachment
from feederflex.scenarios import ProfileSet


def small_feeder(rating=0.5, vmin=0.9, three_phase_user=False):
    z1 = np.array([[0.02 + 0.008j]])
    zt = np.full((3, 3), 0.004j) + np.diag([0.02 + 0.008j] * 3)
    user2_phases = ("a", "b", "c") if three_phase_user else ("a",)
    z2 = zt * 0.5 if three_phase_user else z1 * 0.5
    return Feeder(
        buses=(
            Bus("src", "abc", is_source=True),
            Bus("j1", "abc", vmin_pu=vmin),
            Bus("h1", "a", vmin_pu=vmin),
            Bus("h2", user2_phases, vmin_pu=vmin),
        ),
        branches=(
            Branch("src", "j1", "abc", zt, rating),
            Branch("j1", "h1", "a", z1, 5.0),
            Branch("j1", "h2", user2_phases, z2, 5.0),
        ),
        users=(UserAttachment("u1", "h1", "a"), UserAttachment("u2", "h2", user2_phases)),
    )


def profiles_for(feeder, p_by_user, step_minutes=15):
    """p_by_user: dict uid -> 1-D kW trajectory applied on attachment phases."""
    users = feeder.sorted_users()
    T = len(next(iter(p_by_user.values())))
    p = np.zeros((len(users), 3, T))
    for k, att in enumerate(users):
        traj = np.asarray(p_by_user[att.user_id], dtype=float)
        for ph in att.phases:
            p[k, {"a": 0, "b": 1, "c": 2}[ph]] = traj / len(att.phases)
    q = p * math.tan(math.acos(0.95))
    return ProfileSet(
        users=tuple(a.user_id for a in users), horizon=T, step_minutes=step_minutes,
        p_fx=p, q_fx=q,
    )


# -- user response ------------------------------------------------------------

def test_response_passthrough_when_inactive():
    f = small_feeder(rating=5.0)
    prof = profiles_for(f, {"u1": [1.0, 2.0], "u2": [0.5, 0.7]})
    contracts = [Contract("u1", 2.0), Contract("u2", 2.0)]
    model = build_milp(f, prof, contracts)
    res = lp_relax_solve(model, fixed={model.index.s_pos(0, t): 0.0 for t in range(2)} |
                                {model.index.s_pos(1, t): 0.0 for t in range(2)})
    assert res.status == "optimal"
    pinj = res.x[model.index.pinj_pos(0, 0, np.arange(2))]
    assert np.allclose(pinj * f.base_power_va / 1000.0, [1.0, 2.0])


def test_response_caps_at_threshold_when_active():
    f = small_feeder(rating=5.0)
    prof = profiles_for(f, {"u1": [3.0, 3.0], "u2": [0.5, 0.7]})
    contracts = [Contract("u1", 2.0), Contract("u2", 2.0)]
    model = build_milp(f, prof, contracts)
    fixed = {model.index.s_pos(0, t): 1.0 for t in range(2)}
    fixed |= {model.index.s_pos(1, t): 0.0 for t in range(2)}
    res = lp_relax_solve(model, fixed=fixed)
    pinj = res.x[model.index.pinj_pos(0, 0, np.arange(2))]
    assert np.allclose(pinj * f.base_power_va / 1000.0, [2.0, 2.0])


def test_response_splits_threshold_over_three_phases():
    f = small_feeder(rating=5.0, three_phase_user=True)
    prof = profiles_for(f, {"u1": [0.5], "u2": [4.0]})
    contracts = [Contract("u1", 2.0), Contract("u2", 3.0)]
    model = build_milp(f, prof, contracts)
    fixed = {model.index.s_pos(1, 0): 1.0, model.index.s_pos(0, 0): 0.0}
    res = lp_relax_solve(model, fixed=fixed)
    per_phase = [
        float(res.x[model.index.pinj_pos(1, slot, 0)]) * f.base_power_va / 1000.0
        for slot in range(3)
    ]
    assert np.allclose(per_phase, [1.0, 1.0, 1.0])
    assert sum(per_phase) == pytest.approx(3.0)


def test_response_requires_contract_for_every_user():
    f = small_feeder()
    prof = profiles_for(f, {"u1": [1.0], "u2": [1.0]})
    with pytest.raises(ValueError, match="missing contracts"):
        user_response_rows(f, prof, [Contract("u1", 2.0)])


# -- model assembly -----------------------------------------------------------

def test_binary_count_full_comfort():
    f = small_feeder()
    prof = profiles_for(f, {"u1": [1.0] * 4, "u2": [1.0] * 4})
    contracts = [Contract(u, 2.0, eta=2, alpha_steps=3, delta_steps=1) for u in ("u1", "u2")]
    model = build_milp(f, prof, contracts)
    assert model.beta == 24  # 3 * 2 users * 4 steps


def test_binary_count_simple_elides_activation_variables():
    f = small_feeder()
    prof = profiles_for(f, {"u1": [1.0] * 4, "u2": [1.0] * 4})
    contracts = [Contract(u, 2.0) for u in ("u1", "u2")]
    model = build_milp(f, prof, contracts)
    assert model.beta == 8
    assert model.time_separable


def test_horizon_mismatch_rejected():
    f = small_feeder()
    prof = profiles_for(f, {"u1": [1.0] * 4, "u2": [1.0] * 4})
    contracts = [Contract(u, 2.0) for u in ("u1", "u2")]
    with pytest.raises(ValueError, match="horizon mismatch"):
        build_milp(f, prof, contracts, horizon=8)


def test_comfort_rows_skip_unlimited_parameters():
    f = small_feeder()
    index = VariableIndex(f, 4)
    rows_all = comfort_rows([Contract(u, 2.0, eta=1, alpha_steps=2, delta_steps=1)
                             for u in ("u1", "u2")], 4, index)
    rows_eta_only = comfort_rows([Contract(u, 2.0, eta=1) for u in ("u1", "u2")], 4, index)
    assert rows_all.n_rows > rows_eta_only.n_rows
    assert not any(lab.startswith("alpha") for lab in rows_eta_only.labels)


# -- LP relaxation ------------------------------------------------------------

def test_lp_with_all_binaries_zero_is_costless_when_uncongested():
    f = small_feeder(rating=5.0)
    prof = profiles_for(f, {"u1": [1.0, 1.0], "u2": [1.0, 1.0]})
    model = build_milp(f, prof, [Contract("u1", 2.0), Contract("u2", 2.0)])
    fixed = {model.index.s_pos(k, t): 0.0 for k in range(2) for t in range(2)}
    res = lp_relax_solve(model, fixed=fixed)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(0.0, abs=1e-9)


def test_lp_relaxation_bounds_the_milp_objective():
    f = small_feeder(rating=0.55)
    prof = profiles_for(f, {"u1": [3.2, 3.4, 1.0], "u2": [3.0, 3.1, 1.0]})
    contracts = [Contract("u1", 1.2), Contract("u2", 1.2)]
    model = build_milp(f, prof, contracts)
    lp = lp_relax_solve(model)
    milp = solve_milp(model)
    assert lp.status == "optimal" and milp.status == "optimal"
    assert lp.objective <= milp.objective + 1e-9


def test_infeasible_fixing_yields_certificate():
    f = small_feeder(rating=0.3)
    prof = profiles_for(f, {"u1": [3.2], "u2": [3.0]})  # trunk needs reductions
    contracts = [Contract("u1", 1.0), Contract("u2", 1.0)]
    model = build_milp(f, prof, contracts)
    fixed = {model.index.s_pos(0, 0): 0.0, model.index.s_pos(1, 0): 0.0}
    res = lp_relax_solve(model, fixed=fixed, certificate=True)
    assert res.status == "infeasible"
    assert res.certificate is not None
    assert res.certificate.violation > 0


def test_model_solution_row_check():
    f = small_feeder(rating=5.0)
    prof = profiles_for(f, {"u1": [1.0], "u2": [1.0]})
    model = build_milp(f, prof, [Contract("u1", 2.0), Contract("u2", 2.0)])
    lp = lp_relax_solve(model)
    assert verify_model_solution(model, lp.x, tol=1e-6) == []


# -- solve --------------------------------------------------------------------

def test_uncongested_instance_needs_no_reductions():
    f = small_feeder(rating=5.0)
    prof = profiles_for(f, {"u1": [1.0, 2.0, 1.0], "u2": [1.0, 1.5, 1.0]})
    model = build_milp(f, prof, [Contract("u1", 2.0), Contract("u2", 2.0)])
    res = solve_milp(model)
    assert res.status == "optimal"
    assert res.objective == 0
    assert not res.schedule.s.any()


def test_congested_with_forecast_below_threshold_is_infeasible():
    # Reduction raises demand to the threshold here, so nothing can help.
    f = small_feeder(rating=0.15)
    prof = profiles_for(f, {"u1": [1.0], "u2": [1.0]})
    contracts = [Contract("u1", 1.5), Contract("u2", 1.5)]
    model = build_milp(f, prof, contracts)
    res = solve_milp(model)
    bf = brute_force_schedule(f, prof, contracts)
    assert res.status == "infeasible"
    assert bf.status == "infeasible"


def test_solver_matches_oracle_on_tiny_congested_case():
    f = small_feeder(rating=0.5)
    prof = profiles_for(f, {"u1": [1.0, 3.5, 1.0], "u2": [1.0, 3.0, 1.0]})
    contracts = [Contract("u1", 1.5), Contract("u2", 1.5)]
    model = build_milp(f, prof, contracts)
    res = solve_milp(model)
    bf = brute_force_schedule(f, prof, contracts)
    assert res.status == bf.status == "optimal"
    assert res.objective == bf.objective
    assert verify_schedule(res.schedule, contracts) == []


def test_solver_is_deterministic():
    f = small_feeder(rating=0.5)
    prof = profiles_for(f, {"u1": [1.0, 3.5, 1.0], "u2": [1.0, 3.0, 1.0]})
    contracts = [Contract("u1", 1.5, eta=1, alpha_steps=2), Contract("u2", 1.5, eta=1, alpha_steps=2)]
    a = solve_milp(build_milp(f, prof, contracts))
    b = solve_milp(build_milp(f, prof, contracts))
    assert np.array_equal(a.schedule.s, b.schedule.s)
    assert a.objective == b.objective and a.nodes == b.nodes


def test_time_limit_zero_reports_timeout():
    f = small_feeder(rating=0.5)
    prof = profiles_for(f, {"u1": [1.0, 3.5, 1.0], "u2": [1.0, 3.0, 1.0]})
    contracts = [Contract("u1", 1.5), Contract("u2", 1.5)]
    model = build_milp(f, prof, contracts)
    res = solve_milp(model, SolveOptions(time_limit=1e-9))
    assert res.status == "timeout"


def test_pruning_does_not_change_the_optimum(tiny_instance_factory):
    for seed in range(40, 52):
        feeder, profiles, contracts, _ = tiny_instance_factory(seed)
        a = solve_milp(build_milp(feeder, profiles, contracts, prune=True))
        b = solve_milp(build_milp(feeder, profiles, contracts, prune=False))
        assert a.status == b.status, f"seed {seed}"
        if a.status == "optimal":
            assert a.objective == b.objective, f"seed {seed}"


def test_oracle_equivalence_quick_batch(tiny_instance_factory):
    agree = 0
    for seed in range(100, 130):
        feeder, profiles, contracts, _ = tiny_instance_factory(seed)
        model = build_milp(feeder, profiles, contracts)
        res = solve_milp(model)
        bf = brute_force_schedule(feeder, profiles, contracts)
        assert res.status == bf.status, f"seed {seed}: {res.status} vs {bf.status}"
        if res.status == "optimal":
            assert res.objective == bf.objective, f"seed {seed}"
            assert verify_schedule(res.schedule, contracts) == []
            agree += 1
    assert agree > 5  # the batch must contain solvable congested cases


# -- exhaustive oracle --------------------------------------------------------

def test_brute_force_enumerates_all_assignments():
    f = small_feeder(rating=5.0)
    prof = profiles_for(f, {"u1": [1.0, 1.0], "u2": [0.0, 0.0]})
    contracts = [Contract("u1", 2.0), Contract("u2", 2.0)]
    res = brute_force_schedule(f, prof, contracts)
    assert res.nodes == 2 ** (2 * 2)
    assert res.objective == 0


def test_brute_force_cap():
    f = small_feeder()
    prof = profiles_for(f, {"u1": [1.0] * 11, "u2": [1.0] * 11})
    with pytest.raises(ValueError, match="cap"):
        brute_force_schedule(f, prof, [Contract("u1", 2.0), Contract("u2", 2.0)])


def test_brute_force_ac_checker_runs():
    f = small_feeder(rating=0.5)
    prof = profiles_for(f, {"u1": [3.5, 1.0], "u2": [3.0, 1.0]})
    contracts = [Contract("u1", 1.5), Contract("u2", 1.5)]
    res = brute_force_schedule(f, prof, contracts, checker="ac")
    assert res.status == "optimal"
    assert verify_schedule(res.schedule, contracts) == []


# -- relative objective error -------------------------------------------------

def test_relative_error_zero_for_equal_objectives():
    assert relative_objective_error(10, 10, 96) == 0.0


def test_relative_error_arithmetic():
    assert relative_objective_error(10, 8, 100) == pytest.approx(0.02)


def test_relative_error_rejects_nonpositive_beta():
    with pytest.raises(ValueError):
        relative_objective_error(1, 2, 0)


def test_relative_error_of_solver_vs_oracle(tiny_instance_factory):
    for seed in (7, 8, 9):
        feeder, profiles, contracts, _ = tiny_instance_factory(seed)
        model = build_milp(feeder, profiles, contracts)
        res = solve_milp(model)
        bf = brute_force_schedule(feeder, profiles, contracts)
        if res.status == bf.status == "optimal":
            assert relative_objective_error(res.objective, bf.objective, model.beta) == 0.0


# -- LP export / assignment import --------------------------------------------

def test_lp_export_and_assignment_round_trip(tmp_path):
    f = small_feeder(rating=0.5)
    prof = profiles_for(f, {"u1": [1.0, 3.5], "u2": [1.0, 3.0]})
    contracts = [Contract("u1", 1.5, eta=1, alpha_steps=2), Contract("u2", 1.5, eta=1, alpha_steps=2)]
    model = build_milp(f, prof, contracts)
    path = tmp_path / "model.lp"
    export_lp(model, path)
    text = path.read_text()
    assert text.startswith("\\ feederflex")
    assert "Minimize" in text and "Subject To" in text and "Binary" in text
    assert "s_u1_0" in text

    res = solve_milp(model)
    sol_path = tmp_path / "solution.txt"
    names = model.index.column_names()
    lines = ["# external assignment"]
    for k in range(2):
        for t in range(2):
            lines.append(f"s_u{k+1}_{t} {int(res.schedule.s[k, t])}")
    sol_path.write_text("\n".join(lines))
    assignment = load_assignment(sol_path)
    rebuilt = schedule_from_assignment(model, assignment)
    assert np.array_equal(rebuilt.s, res.schedule.s)
    assert verify_schedule(rebuilt, contracts) == []
