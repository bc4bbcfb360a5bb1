"""Scenario generation: feeders, profiles, EV sessions, CSV round-trips."""

import math

import numpy as np
import pytest

from feederflex.acpf import detect_congestion, solve_ac_pf
from feederflex.contracts import Contract
from feederflex.network import feeder_to_json, validate_feeder
from feederflex.scenarios import (
    ProfileSet,
    ScenarioParams,
    attach_ev_sessions,
    forecast_demand_pu,
    generate_baseline_profiles,
    generate_feeder,
    generate_scenario,
    gtd_demand_pu,
    load_profiles,
    realized_demand_kw,
    save_profiles,
)


def test_feeder_has_requested_users_and_is_radial():
    params = ScenarioParams(n_users=11, seed=1, horizon=4)
    feeder = generate_feeder(params)
    assert len(feeder.users) == 11
    assert validate_feeder(feeder).ok
    assert len(feeder.branches) == len(feeder.buses) - 1


def test_same_seed_reproduces_feeder_exactly():
    params = ScenarioParams(n_users=7, seed=42, horizon=4)
    a = generate_feeder(params)
    b = generate_feeder(params)
    assert feeder_to_json(a) == feeder_to_json(b)


def test_zero_users_rejected():
    with pytest.raises(ValueError, match="n_users"):
        ScenarioParams(n_users=0, seed=1).validate()


def test_horizon_beyond_one_day_rejected():
    with pytest.raises(ValueError, match="day-ahead"):
        ScenarioParams(n_users=3, horizon=97, step_minutes=15).validate()


def test_baseline_profile_shape_and_power_factor():
    params = ScenarioParams(n_users=5, seed=2, horizon=96, step_minutes=15)
    feeder = generate_feeder(params)
    profiles = generate_baseline_profiles(feeder, params)
    assert profiles.horizon == 96  # 24 h at 15 minutes
    assert profiles.p_fx.shape == (5, 3, 96)
    tan_phi = math.tan(math.acos(params.power_factor))
    assert np.allclose(profiles.q_fx, profiles.p_fx * tan_phi)
    peaks = profiles.p_fx.sum(axis=1).max(axis=1)
    assert np.all(peaks >= params.peak_kw_min - 1e-9)
    assert np.all(peaks <= params.peak_kw_max + 1e-9)


def test_zero_demand_configuration_yields_zero_profiles():
    params = ScenarioParams(n_users=3, seed=2, horizon=8, peak_kw_min=0.0, peak_kw_max=0.0)
    feeder = generate_feeder(params)
    profiles = generate_baseline_profiles(feeder, params)
    assert not profiles.p_fx.any()
    assert not profiles.q_fx.any()


def test_ev_sessions_modify_exactly_the_requested_share():
    params = ScenarioParams(n_users=10, seed=3, horizon=96, ev_share=0.30)
    feeder = generate_feeder(params)
    base = generate_baseline_profiles(feeder, params)
    with_ev = attach_ev_sessions(base, feeder, params)
    changed = [
        k for k in range(10) if not np.array_equal(base.p_fx[k], with_ev.p_fx[k])
    ]
    assert len(changed) == 3  # 0.30 * 10


def test_ev_sessions_never_decrease_demand_and_add_rated_power():
    params = ScenarioParams(n_users=8, seed=4, horizon=96, ev_share=0.5)
    feeder = generate_feeder(params)
    base = generate_baseline_profiles(feeder, params)
    with_ev = attach_ev_sessions(base, feeder, params)
    delta = with_ev.p_fx - base.p_fx
    assert np.all(delta >= -1e-12)
    levels = np.unique(np.round(delta[delta > 1e-9], 9))
    assert levels.tolist() == [pytest.approx(params.ev_power_kva * params.power_factor)]


def test_ev_share_zero_is_identity():
    params = ScenarioParams(n_users=4, seed=5, horizon=24, ev_share=0.0)
    feeder = generate_feeder(params)
    base = generate_baseline_profiles(feeder, params)
    out = attach_ev_sessions(base, feeder, params)
    assert np.array_equal(out.p_fx, base.p_fx)
    assert np.array_equal(out.q_fx, base.q_fx)


def test_ev_share_out_of_range_rejected():
    with pytest.raises(ValueError, match="ev_share"):
        ScenarioParams(n_users=4, ev_share=1.2).validate()


def test_congestion_target_holds():
    params = ScenarioParams(n_users=9, seed=6, horizon=96)
    feeder, profiles = generate_scenario(params)
    forecast = solve_ac_pf(feeder, forecast_demand_pu(feeder, profiles))
    assert (not forecast.converged) or (not detect_congestion(forecast, feeder).ok)
    contracts = [Contract(u.user_id, params.p_gtd_kw) for u in feeder.sorted_users()]
    reduced = solve_ac_pf(feeder, gtd_demand_pu(feeder, contracts))
    assert reduced.converged
    assert detect_congestion(reduced, feeder).ok


def test_scenario_is_deterministic_end_to_end():
    params = ScenarioParams(n_users=6, seed=9, horizon=48)
    f1, p1 = generate_scenario(params)
    f2, p2 = generate_scenario(params)
    assert feeder_to_json(f1) == feeder_to_json(f2)
    assert np.array_equal(p1.p_fx, p2.p_fx)
    assert np.array_equal(p1.q_fx, p2.q_fx)


def test_realized_demand_interpolates_between_forecast_and_threshold():
    params = ScenarioParams(n_users=2, seed=3, horizon=4)
    feeder = generate_feeder(params)
    profiles = generate_baseline_profiles(feeder, params)
    contracts = [Contract(u.user_id, 2.0) for u in feeder.sorted_users()]
    s = np.zeros((2, 4), dtype=np.int8)
    p0, _ = realized_demand_kw(feeder, profiles, contracts, s)
    assert np.allclose(p0, profiles.p_fx)
    s[0, :] = 1
    p1, _ = realized_demand_kw(feeder, profiles, contracts, s)
    att = feeder.sorted_users()[0]
    total = p1[0, :, 0].sum()
    assert total == pytest.approx(2.0)
    assert np.allclose(p1[1], profiles.p_fx[1])


# -- CSV round trips ----------------------------------------------------------

def test_profile_csv_round_trip(tmp_path):
    params = ScenarioParams(n_users=3, seed=7, horizon=6)
    feeder = generate_feeder(params)
    profiles = generate_baseline_profiles(feeder, params)
    path = tmp_path / "profiles.csv"
    save_profiles(profiles, path, feeder)
    back = load_profiles(path, feeder, step_minutes=params.step_minutes)
    assert back.users == profiles.users
    assert np.array_equal(back.p_fx, profiles.p_fx)
    assert np.array_equal(back.q_fx, profiles.q_fx)


def test_small_csv_without_feeder(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text(
        "t,user,phase,p_kw,q_kvar\n"
        "0,u1,a,1.0,0.2\n1,u1,a,1.5,0.3\n2,u1,a,0.5,0.1\n3,u1,a,0.2,0.0\n"
        "0,u2,b,2.0,0.4\n1,u2,b,2.5,0.5\n2,u2,b,1.0,0.2\n3,u2,b,0.4,0.1\n"
    )
    ps = load_profiles(path)
    assert ps.horizon == 4
    assert ps.users == ("u1", "u2")
    assert ps.p_fx[0, 0, 1] == 1.5
    assert ps.p_fx[1, 1, 0] == 2.0


def test_duplicate_row_names_the_triplet(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("t,user,phase,p_kw,q_kvar\n0,u1,a,1.0,0.2\n0,u1,a,1.1,0.2\n")
    with pytest.raises(ValueError, match=r"t=0, user=u1, phase=a"):
        load_profiles(path)


def test_ragged_horizon_rejected(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text(
        "t,user,phase,p_kw,q_kvar\n0,u1,a,1.0,0.2\n1,u1,a,1.0,0.2\n0,u2,a,1.0,0.2\n"
    )
    with pytest.raises(ValueError, match="inconsistent horizon"):
        load_profiles(path)


def test_unknown_user_rejected_against_feeder(tmp_path):
    params = ScenarioParams(n_users=2, seed=8, horizon=2)
    feeder = generate_feeder(params)
    path = tmp_path / "p.csv"
    path.write_text("t,user,phase,p_kw,q_kvar\n0,ghost,a,1.0,0.2\n1,ghost,a,1.0,0.2\n")
    with pytest.raises(ValueError, match="not present in the feeder"):
        load_profiles(path, feeder)


def test_malformed_row_rejected(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("t,user,phase,p_kw,q_kvar\nzero,u1,a,1.0,0.2\n")
    with pytest.raises(ValueError, match="malformed row"):
        load_profiles(path)


def test_profileset_dimension_validation():
    with pytest.raises(ValueError, match="shape"):
        ProfileSet(users=("u1",), horizon=4, step_minutes=15,
                   p_fx=np.zeros((1, 3, 3)), q_fx=np.zeros((1, 3, 4)))
