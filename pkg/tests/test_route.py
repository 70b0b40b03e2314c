import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import brentq

from oracle import enumerate_all, toy_vehicle
from ecobnb.ocp import SolverConfig
from ecobnb.route import (
    KMH,
    ROUTE_KINDS,
    STANDSTILL_SPEED,
    Horizon,
    InfeasibleRouteError,
    RouteError,
    RouteParseError,
    RoutePoint,
    RouteProfile,
    TruncationError,
    bundled_route,
    dumps_route,
    generate_route,
    load_route,
    loads_route,
    node_bounds,
    resample,
    save_route,
    tighten_bounds,
)

HEADER = "s_m,grade_rad,vmin_mps,vmax_mps\n"
BUNDLED = {"flat": 3000.0, "hill": 5000.0, "stops": 4000.0, "mixed": 5000.0}


# -- parsing ------------------------------------------------------------------------


def test_three_row_file_gives_three_points():
    r = loads_route(HEADER + "0,0,2,20\n100,0.01,2,20\n200,0.01,2,20\n")
    assert len(r) == 3
    assert r.length == 200.0


def test_row_with_vmin_above_vmax_is_named():
    with pytest.raises(RouteParseError) as exc:
        loads_route(HEADER + "0,0,2,20\n100,0,25,20\n200,0,2,20\n")
    assert exc.value.line == 3
    assert "line 3" in str(exc.value)


@pytest.mark.parametrize("body, line", [
    ("0,0,2\n", 2),
    ("0,0,2,abc\n", 2),
    ("0,0,2,20\n50,0,2,20\n50,0,2,20\n", 4),
])
def test_malformed_rows_report_their_line(body, line):
    with pytest.raises(RouteParseError) as exc:
        loads_route(HEADER + body)
    assert exc.value.line == line


def test_missing_header_and_bad_schema_rejected():
    with pytest.raises(RouteParseError):
        loads_route("0,0,2,20\n10,0,2,20\n")
    with pytest.raises(RouteParseError):
        loads_route("# schema: route/9\n" + HEADER + "0,0,2,20\n10,0,2,20\n")


def test_profile_invariants():
    with pytest.raises(RouteError):
        RouteProfile((RoutePoint(0, 0, 1, 2),))
    with pytest.raises(RouteError):
        RouteProfile((RoutePoint(5, 0, 1, 2), RoutePoint(10, 0, 1, 2)))
    with pytest.raises(RouteError):
        RouteProfile((RoutePoint(0, 0, 1, 0), RoutePoint(10, 0, 1, 2)))
    with pytest.raises(RouteError):
        RouteProfile((RoutePoint(0, math.nan, 1, 2), RoutePoint(10, 0, 1, 2)))


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_bundled_routes_round_trip_bytes(name, tmp_path):
    from importlib import resources

    text = resources.files("ecobnb.data").joinpath("routes", f"{name}.csv").read_text()
    route = bundled_route(name)
    assert dumps_route(route) == text
    path = tmp_path / f"{name}.csv"
    save_route(route, path)
    assert path.read_text() == text
    again = load_route(path)
    assert again.points == route.points


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_bundled_routes_are_the_seed_zero_generator_output(name):
    assert bundled_route(name).points == generate_route(name, BUNDLED[name], seed=0).points


@st.composite
def routes(draw, max_pieces=8):
    n = draw(st.integers(1, max_pieces))
    cuts = sorted(draw(st.sets(st.integers(1, 999), min_size=n - 1, max_size=n - 1)))
    length = draw(st.integers(max(cuts, default=0) + 1, 1000))
    pts = []
    for s in [0] + cuts:
        hi = draw(st.floats(3.0, 30.0))
        lo = draw(st.floats(0.0, hi))
        a = draw(st.floats(-0.06, 0.06))
        pts.append(RoutePoint(float(s), a, lo, hi))
    pts.append(RoutePoint(float(length), pts[-1].alpha, pts[-1].v_min_r, pts[-1].v_max_r))
    return RouteProfile(tuple(pts), name="r")


@given(routes())
def test_dump_load_round_trip_is_exact(route):
    again = loads_route(dumps_route(route))
    assert again.points == route.points
    assert dumps_route(again) == dumps_route(route)


# -- resampling -----------------------------------------------------------------------


def _scan_bounds(route, x, ds):
    """Brute-force node bounds: 1000 samples strictly inside the open interval."""
    a, b = max(x - ds, 0.0), min(x + ds, route.length)
    xs = a + (np.arange(1000) + 0.5) * (b - a) / 1000
    xs = np.append(xs, x)
    lo = float(route.v_min_at(xs).max())
    hi = float(route.v_max_at(xs).min())
    return (0.5 * hi, hi) if lo >= hi else (lo, hi)


def test_constant_route_gives_constant_arrays():
    r = RouteProfile((RoutePoint(0, 0.01, 5.0, 20.0), RoutePoint(1000, 0.01, 5.0, 20.0)))
    h = resample(r, 0.0, 40, 25.0)
    assert h.N == 40
    assert np.all(h.alpha == 0.01)
    assert np.all(h.v_min == 5.0) and np.all(h.v_max == 20.0)


def test_vmax_step_inside_stage_takes_lower_limit():
    r = RouteProfile((RoutePoint(0, 0, 2, 20), RoutePoint(60, 0, 2, 15), RoutePoint(200, 0, 2, 15)))
    h = resample(r, 0.0, 8, 25.0)
    # stage 2 covers [50, 75]: both of its nodes see the 15 m/s limit
    assert h.v_max[1] == 20.0
    assert h.v_max[2] == 15.0 and h.v_max[3] == 15.0


def test_grade_sampled_at_stage_midpoints():
    r = RouteProfile((RoutePoint(0, 0.0, 2, 20), RoutePoint(40, 0.03, 2, 20), RoutePoint(100, 0.03, 2, 20)))
    h = resample(r, 0.0, 4, 25.0)
    assert list(h.alpha) == [0.0, 0.0, 0.03, 0.03]  # midpoints 12.5, 37.5, 62.5, 87.5


@given(routes(), st.sampled_from([5.0, 10.0, 25.0]), st.data())
def test_node_bounds_match_fine_scan(route, ds, data):
    n_max = int(route.length // ds)
    if n_max < 1:
        return
    N = data.draw(st.integers(1, n_max))
    s0 = data.draw(st.integers(0, int((route.length - N * ds) // ds))) * ds
    h = resample(route, float(s0), N, ds)
    for i in range(N + 1):
        lo, hi = _scan_bounds(route, s0 + i * ds, ds)
        assert h.v_min[i] == lo and h.v_max[i] == hi


def test_node_bounds_do_not_depend_on_window_start():
    route = generate_route("mixed", 5000.0, seed=3)
    a = resample(route, 0.0, 200, 25.0)
    b = resample(route, 1000.0, 100, 25.0)
    assert np.array_equal(a.v_min[40:141], b.v_min)
    assert np.array_equal(a.v_max[40:141], b.v_max)


def test_standstill_window_relaxes_lower_bound():
    route = generate_route("stops", 4000.0, seed=0)
    lo, hi = node_bounds(route, np.array([1600.0, 1625.0]), 25.0)
    assert np.allclose(hi, STANDSTILL_SPEED)
    assert np.allclose(lo, 0.5 * STANDSTILL_SPEED)


def test_horizon_past_route_end_is_truncation_error():
    r = RouteProfile((RoutePoint(0, 0, 2, 20), RoutePoint(100, 0, 2, 20)))
    resample(r, 0.0, 4, 25.0)
    with pytest.raises(TruncationError):
        resample(r, 25.0, 4, 25.0)


# -- tightening ----------------------------------------------------------------------------


def _horizon(v_min, v_max, alpha=0.0, ds=25.0):
    v_min = np.asarray(v_min, dtype=float)
    v_max = np.asarray(v_max, dtype=float)
    return Horizon(0.0, ds, np.full(v_max.size - 1, alpha), v_min, v_max)


def _ideal(p, v, alpha, ds):
    """Independent ideal-power envelopes on flat ground (no losses, no inertia)."""
    F = 0.5 * p.rho_a * p.c_d * p.A_f * v ** 2 + p.m * p.g * (p.c_rr * np.cos(alpha) + np.sin(alpha))
    return v + (p.P_e_max / v - F) / (p.m * v) * ds, v + (-p.P_b_max / v - F) / (p.m * v) * ds


def test_constant_bounds_unchanged(p):
    h = _horizon(np.full(21, STANDSTILL_SPEED), np.full(21, 80 * KMH))
    t = tighten_bounds(h, p)
    assert np.array_equal(t.v_min, h.v_min) and np.array_equal(t.v_max, h.v_max)


def test_step_up_follows_acceleration_envelope(p):
    k = 5
    v_max = np.where(np.arange(31) <= k, 10.0, 25.0)
    h = _horizon(np.full(31, 8.0), v_max)
    t = tighten_bounds(h, p)
    # independent forward integration of the envelope from the top of the box
    ref = v_max.copy()
    for i in range(k, 30):
        grid = np.linspace(8.0, ref[i], 20001)
        ref[i + 1] = min(ref[i + 1], _ideal(p, grid, 0.0, 25.0)[0].max())
    assert np.all(t.v_max <= h.v_max)
    assert ref[k + 1] < 25.0 and ref[k + 2] < 25.0  # the envelope is active
    np.testing.assert_allclose(t.v_max[k:], ref[k:], rtol=0, atol=1e-6)


def test_step_down_follows_braking_envelope(p):
    k = 20
    v_max = np.where(np.arange(31) < k, 25.0, 10.0)
    h = _horizon(np.full(31, 8.0), v_max)
    t = tighten_bounds(h, p)
    ref = v_max.copy()
    for i in range(k - 1, -1, -1):
        if _ideal(p, ref[i], 0.0, 25.0)[1] > ref[i + 1]:
            ref[i] = brentq(lambda v: _ideal(p, v, 0.0, 25.0)[1] - ref[i + 1], 8.0, ref[i], xtol=1e-13)
    assert ref[k - 1] < 25.0
    np.testing.assert_allclose(t.v_max[:k + 1], ref[:k + 1], rtol=0, atol=1e-6)


def test_tightening_is_idempotent_and_inside_original(p):
    for kind in ROUTE_KINDS:
        route = generate_route(kind, 5000.0, seed=1)
        h = resample(route, 0.0, 200, 25.0)
        t = tighten_bounds(h, p)
        assert np.all(t.v_min >= h.v_min) and np.all(t.v_max <= h.v_max)
        tt = tighten_bounds(t, p)
        assert np.array_equal(tt.v_min, t.v_min) and np.array_equal(tt.v_max, t.v_max)


def test_impossible_bounds_raise_with_stage(p):
    # a 10 % climb that must be taken at 25 m/s or more
    h = _horizon(np.full(11, 24.0), np.full(11, 25.0), alpha=0.1)
    with pytest.raises(InfeasibleRouteError) as exc:
        tighten_bounds(h, p)
    assert 0 <= exc.value.stage <= 10


@pytest.mark.parametrize("seed", range(6))
def test_tightening_keeps_every_completable_trajectory(p, seed):
    rng = np.random.default_rng(seed)
    toy = toy_vehicle(p, 1 + seed % 2)
    N = 5
    lo, hi = rng.uniform(14, 17), rng.uniform(20, 24)
    v_max = np.full(N + 1, hi)
    v_max[int(rng.integers(2, N + 1))] = lo + 1.5
    h = Horizon(0.0, 25.0, rng.uniform(-0.03, 0.03, N).round(4), np.full(N + 1, lo), v_max)
    t = tighten_bounds(h, toy)
    for v0 in np.linspace(lo, hi, 7):
        e = enumerate_all(v0, h, SolverConfig(N=N), toy)
        for k in range(N + 1):
            live = e.v[k][np.isfinite(e.ctg[k])]
            assert np.all(live >= t.v_min[k] - 1e-9) and np.all(live <= t.v_max[k] + 1e-9)


# -- synthetic routes -----------------------------------------------------------------


def test_generator_is_deterministic():
    for kind in ROUTE_KINDS:
        assert dumps_route(generate_route(kind, 4000.0, seed=7)) == dumps_route(generate_route(kind, 4000.0, seed=7))
    assert generate_route("hill", 5000.0, seed=1).points != generate_route("hill", 5000.0, seed=2).points


def test_generated_features():
    flat = generate_route("flat", 3000.0)
    assert len(flat) == 2 and flat.points[0].alpha == 0.0
    mixed = generate_route("mixed", 5000.0)
    alphas = mixed._arrays["alpha"]
    assert alphas.max() >= 0.02 and alphas.min() <= -0.03
    v_max = mixed._arrays["v_max"]
    assert np.isclose(v_max.min(), STANDSTILL_SPEED)
    assert np.any(np.isclose(v_max, 60 * KMH))
    stops = generate_route("stops", 4000.0)
    assert np.isclose(float(stops.v_max_at(1610.0)), STANDSTILL_SPEED)
    assert np.isclose(float(stops.v_max_at(2800.0)), 60 * KMH)


def test_generator_rejects_unknown_kind():
    with pytest.raises(ValueError):
        generate_route("moon", 1000.0)
