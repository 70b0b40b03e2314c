import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import physics
from ecobnb.vehicle import (
    ConfigError,
    DrivingMode,
    InfeasibleModeError,
    ModeGear,
    Reason,
    VehicleError,
    bsfc_optimal_torque,
    combo_arrays,
    combos,
    downhill_brake_torque,
    downhill_residual,
    engine_speed,
    fuel_rate,
    load_vehicle,
    mode_dynamics,
    mode_feasible,
    mode_fuel_per_meter,
    mode_fuel_rate,
    mode_table,
    resistance_force,
    transmission_efficiency,
    transmission_loss,
    vehicle_from_dict,
)

LABELS = [m.label for m in DrivingMode]
speeds = st.floats(3.0, 30.0)
grades = st.floats(-0.06, 0.06)


# -- resistance, gearbox, engine ------------------------------------------------------


def test_resistance_at_standstill_is_rolling_only(p):
    assert resistance_force(0.0, 0.0, p) == pytest.approx(p.m * p.g * p.c_rr, rel=1e-15)


def test_resistance_without_rolling_is_drag(p):
    q = dataclasses.replace(p, c_rr=0.0)
    assert resistance_force(10.0, 0.0, q) == pytest.approx(50 * q.rho_a * q.c_d * q.A_f, rel=1e-15)


def test_resistance_default_point_frozen(p):
    # 0.5*1.2*0.55*10*22^2 + 40000*9.81*(0.006*cos 0.02 + sin 0.02)
    assert resistance_force(22.0, 0.02, p) == pytest.approx(11798.605946, rel=1e-9)
    assert resistance_force(22.0, 0.02, p) == pytest.approx(physics.resistance(p, 22.0, 0.02), rel=1e-14)


def test_zero_loss_gearbox(p):
    q = dataclasses.replace(p, tloss_coeffs=[[0.0, 0.0, 0.0]] * p.n_gears)
    assert transmission_loss(500.0, 1200.0, 3, q) == 0.0
    assert transmission_efficiency(500.0, 1200.0, 3, q) == 1.0


def test_gear8_loss_matches_polynomial(p):
    c1, c2, c3 = p.tloss_coeffs[7]
    assert transmission_loss(1000.0, 1200.0, 8, p) == pytest.approx(c1 * 1200 + c2 * 1000 + c3, rel=1e-15)
    assert transmission_loss(1000.0, 1200.0, 8, p) == pytest.approx(21.08, rel=1e-12)


def test_efficiency_clamped_for_tiny_torque(p):
    assert transmission_efficiency(1e-6, 1200.0, 8, p) == 0.0
    assert transmission_efficiency(0.0, 1200.0, 8, p) == 0.0


@given(st.floats(0.0, 3000.0), st.floats(600.0, 2200.0), st.integers(1, 12))
def test_efficiency_in_unit_interval(T, w, gear):
    from ecobnb.vehicle import default_vehicle
    eta = transmission_efficiency(T, w, gear, default_vehicle())
    assert 0.0 <= eta <= 1.0


def test_engine_speed_neutral_is_idle(p):
    assert engine_speed(0, 17.0, p) == p.omega_idle


def test_engine_speed_unit_cancellation(p):
    q = dataclasses.replace(p, gears=[1.0], J_pt=[300.0], tloss_coeffs=[p.tloss_coeffs[-1]], i_r=1.0,
                            r_w=30 / math.pi)
    assert engine_speed(1, 1.0, q) == pytest.approx(1.0, rel=1e-15)


def test_engine_speed_top_gear_frozen(p):
    # 30 * 2.64 * 25 / (pi * 0.5)
    assert engine_speed(12, 25.0, p) == pytest.approx(1260.5071492, rel=1e-9)


def test_fuel_constant_term(p):
    assert fuel_rate(0.0, 0.0, p) == max(p.fuel_coeffs[0], 0.0)


def test_fuel_mid_map_matches_polynomial(p):
    assert fuel_rate(1500.0, 1300.0, p) == pytest.approx(physics.mdot(p, 1500.0, 1300.0), rel=1e-14)


def test_fuel_rate_never_negative(p):
    w, T = np.meshgrid(np.linspace(0, 3000, 31), np.linspace(-500, 3000, 36))
    assert np.all(fuel_rate(T, w, p) >= 0)


def test_bsfc_line_beats_other_points_at_same_power(p):
    for P in np.linspace(0.1, 0.95, 7) * p.P_e_max:
        T_opt, w_opt = bsfc_optimal_torque(P, p)
        ws = np.linspace(p.omega_min, p.omega_max, 2000)
        Ts = 30 * P / (np.pi * ws)
        ok = Ts <= p.max_torque(ws)
        best = float(np.min(fuel_rate(Ts[ok], ws[ok], p)))
        assert fuel_rate(T_opt, w_opt, p) <= best * (1 + 1e-3)


def test_bsfc_max_power_returns_boundary(p):
    T, w = bsfc_optimal_torque(p.P_e_max, p)
    assert T == pytest.approx(float(p.max_torque(w)), rel=1e-6)


def test_bsfc_above_max_power_rejected(p):
    with pytest.raises(VehicleError):
        bsfc_optimal_torque(1.01 * p.P_e_max, p)


def test_bsfc_global_optimum_returned(p):
    w, T = np.meshgrid(np.linspace(p.omega_min, p.omega_max, 400), np.linspace(50, 2500, 400))
    ok = T <= p.max_torque(w)
    bsfc = np.where(ok, fuel_rate(T, w, p) / (T * w), np.inf)
    k = np.unravel_index(np.argmin(bsfc), bsfc.shape)
    P = np.pi / 30 * T[k] * w[k]
    T_opt, w_opt = bsfc_optimal_torque(P, p)
    assert fuel_rate(T_opt, w_opt, p) <= fuel_rate(T[k], w[k], p) * (1 + 1e-3)


def test_peak_efficiency_below_config_estimate(p):
    assert 0.40 < p.peak_engine_efficiency < p.eta_opt


# -- driving modes ------------------------------------------------------------------


def test_combo_order(p):
    cs = combos(p)
    assert len(cs) == 5 * p.n_gears + 1
    assert cs[p.n_gears] == ModeGear(DrivingMode.ECO_ROLL, 0)
    modes, gears = combo_arrays(p)
    assert [int(m) for m in modes] == [int(c.mode) for c in cs]


@given(speeds, grades)
def test_cruise_and_downhill_hold_speed(v, a):
    from ecobnb.vehicle import default_vehicle
    tab = mode_table([v], a, default_vehicle())
    G = default_vehicle().n_gears
    hold = np.r_[0:G, 4 * G + 1:5 * G + 1]
    assert np.all(np.abs(tab.dvds[0, hold]) < 1e-12)


def test_ecoroll_equilibrium_grade(p):
    v = 20.0
    drag = 0.5 * p.rho_a * p.c_d * p.A_f * v * v
    # solve m g (c_rr cos a + sin a) = -drag
    from scipy.optimize import brentq
    a = brentq(lambda a: drag + p.m * p.g * (p.c_rr * math.cos(a) + math.sin(a)), -0.2, 0.0, xtol=1e-15)
    assert abs(mode_dynamics(ModeGear(DrivingMode.ECO_ROLL, 0), v, a, p)) < 1e-12


@given(speeds, grades)
def test_dynamics_match_independent_model(v, a):
    from ecobnb.vehicle import default_vehicle
    p = default_vehicle()
    tab = mode_table([v], a, p)
    for k, mg in enumerate(combos(p)):
        if not tab.feasible[0, k]:
            continue
        ref = physics.dvds(p, mg.mode.label, mg.gear, v, a)
        assert tab.dvds[0, k] == pytest.approx(ref, rel=1e-12, abs=1e-15)


@given(speeds, grades)
def test_fuel_matches_independent_model(v, a):
    from ecobnb.vehicle import default_vehicle
    p = default_vehicle()
    tab = mode_table([v], a, p)
    modes, gears = combo_arrays(p)
    rates = mode_fuel_rate(modes, gears, np.full(len(modes), v), a, p)
    for k, mg in enumerate(combos(p)):
        if tab.feasible[0, k]:
            assert rates[k] == pytest.approx(physics.fuel_rate(p, mg.mode.label, mg.gear, v, a), rel=1e-12)


@given(speeds, grades, st.integers(1, 12))
def test_engine_brake_decelerates_more_than_coast(v, a, gear):
    from ecobnb.vehicle import default_vehicle
    p = default_vehicle()
    tab = mode_table([v], a, p)
    G = p.n_gears
    co, eb = G + gear, 2 * G + gear
    if tab.feasible[0, co]:
        assert tab.dvds[0, eb] <= tab.dvds[0, co]


def test_downhill_residual_small(p):
    for gear in range(1, p.n_gears + 1):
        for v in (12.0, 18.0, 22.0):
            a = -0.04
            try:
                T = downhill_brake_torque(gear, v, a, p)
            except InfeasibleModeError:
                continue
            assert 0.0 <= T <= float(p.max_brake_torque(engine_speed(gear, v, p)))
            assert abs(downhill_residual(gear, v, a, T, p)) < 1e-9


def test_downhill_too_steep_is_infeasible(p):
    with pytest.raises(InfeasibleModeError) as exc:
        downhill_brake_torque(12, 22.0, -0.3, p)
    assert exc.value.reason is Reason.BRAKE_MAX


def test_downhill_disabled_on_flat(p):
    ok, why = mode_feasible(ModeGear(DrivingMode.DOWNHILL, 12), 20.0, 0.0, p)
    assert not ok and why is Reason.DOWNHILL_DISABLED


def test_coast_fuel_zero_and_ecoroll_idle(p):
    assert mode_fuel_per_meter(ModeGear(DrivingMode.COAST, 12), 20.0, 0.0, p) == 0.0
    assert mode_fuel_per_meter(ModeGear(DrivingMode.ECO_ROLL, 0), 20.0, 0.0, p) == pytest.approx(
        p.mdot_f_idle / 20.0, rel=1e-15)


def test_cruise_fuel_per_meter_sweep(p):
    # on the default map the per-metre cruise fuel rises with speed in every
    # gear (drag outweighs the efficiency gain), so the sweep only records it
    for gear in (10, 11, 12):
        vs = [v for v in np.linspace(8, 25, 69) if mode_feasible(ModeGear(DrivingMode.CRUISE, gear), v, 0.0, p)[0]]
        f = [mode_fuel_per_meter(ModeGear(DrivingMode.CRUISE, gear), v, 0.0, p) for v in vs]
        assert len(f) > 10
        assert np.all(np.diff(f) > 0)


def test_low_gear_at_highway_speed_exceeds_omega_max(p):
    ok, why = mode_feasible(ModeGear(DrivingMode.CRUISE, 1), 22.0, 0.0, p)
    assert not ok and why is Reason.OMEGA_MAX


def test_cruise_on_impossible_grade(p):
    for gear in range(1, p.n_gears + 1):
        ok, why = mode_feasible(ModeGear(DrivingMode.CRUISE, gear), 15.0, 0.25, p)
        assert not ok


def _independent_feasible(p, mg, v, a):
    """Constraint-by-constraint restatement used as the feasibility oracle."""
    F = physics.resistance(p, v, a)
    if mg.mode is DrivingMode.ECO_ROLL:
        return True
    w = physics.omega(p, mg.gear, v)
    if not p.omega_min <= w <= p.omega_max:
        return False
    label = mg.mode.label
    if label == "Cruise":
        T = physics.gross(p, mg.gear, F * p.r_w / (p.eta_r * p.i_r * p.gears[mg.gear - 1]), w)
        return F > 0 and T <= physics.table(p.T_e_max, w)
    if label == "Downhill":
        gears_ok = [g for g in range(1, p.n_gears + 1) if p.omega_min <= physics.omega(p, g, v) <= p.omega_max]
        coast_weak = all(physics.dvds(p, "Coast", g, v, a) > 0 for g in gears_ok)
        if not (F < 0 and coast_weak and gears_ok):
            return False
        T = physics.gross(p, mg.gear, -F * p.r_w / (p.eta_r * p.i_r * p.gears[mg.gear - 1]), w)
        return T - physics.table(p.T_in_fr, w) <= physics.table(p.T_eb_max, w)
    return True


def test_feasibility_table_toy_vehicle(p):
    toy = p.with_gears([1, 4, 7, 10, 12])
    for v in np.linspace(3, 26, 24):
        for a in np.linspace(-0.08, 0.08, 17):
            tab = mode_table([v], a, toy)
            for k, mg in enumerate(combos(toy)):
                assert bool(tab.feasible[0, k]) == _independent_feasible(toy, mg, v, a), (mg, v, a)


@given(st.lists(speeds, min_size=1, max_size=20), grades)
def test_scalar_and_batch_agree_bitwise(vs, a):
    from ecobnb.vehicle import default_vehicle
    p = default_vehicle()
    batch = mode_table(vs, a, p)
    for i, v in enumerate(vs):
        one = mode_table([v], a, p)
        assert np.array_equal(one.dvds[0], batch.dvds[i])
        assert np.array_equal(one.feasible[0], batch.feasible[i])


# -- configuration ------------------------------------------------------------------


def test_roundtrip_dict(p):
    assert vehicle_from_dict(p.to_dict()) == p


def test_missing_key_named(p):
    d = p.to_dict()
    del d["c_d"]
    with pytest.raises(ConfigError, match="c_d"):
        vehicle_from_dict(d)


@pytest.mark.parametrize("key,value", [("m", -1.0), ("eta_r", 1.5), ("gears", [2.0, 3.0]),
                                       ("omega_min", 3000.0)])
def test_invalid_values_named(p, key, value):
    d = p.to_dict()
    d[key] = value
    with pytest.raises(ConfigError, match=key):
        vehicle_from_dict(d)


def test_load_vehicle_file(tmp_path, p):
    path = tmp_path / "v.toml"
    path.write_text("m = 1.0\n")
    with pytest.raises(ConfigError):
        load_vehicle(path)
    path.write_text("m = [\n")
    with pytest.raises(ConfigError):
        load_vehicle(path)


def test_mode_gear_validation():
    with pytest.raises(VehicleError):
        ModeGear(DrivingMode.ECO_ROLL, 3)
    with pytest.raises(VehicleError):
        ModeGear(DrivingMode.CRUISE, 0)
    assert str(ModeGear(DrivingMode.COAST, 4)) == "Coast/4"
