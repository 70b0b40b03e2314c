import itertools
import math

import numpy as np
from hypothesis import given, strategies as st

from oracle import toy_vehicle
from ecobnb.ocp import SolverConfig, check_sequence, rollout
from ecobnb.route import Horizon, generate_route, resample, tighten_bounds
from ecobnb.vehicle import DrivingMode as M, ModeGear, mode_table
from ecobnb.warmstart import generate, no_warm_start, segment_events


def _flat(N, lo=10.0, hi=22.0, alpha=0.0):
    return Horizon(0.0, 25.0, np.full(N, alpha), np.full(N + 1, lo), np.full(N + 1, hi))


def test_constant_vmax_is_one_event():
    assert segment_events(np.full(11, 20.0)) == [(10, 20.0)]
    assert segment_events(np.full(11, 20.0), v_f=18.0) == [(10, 18.0)]


def test_two_plateaus_give_two_events():
    v = np.array([20.0] * 4 + [15.0] * 7)
    assert segment_events(v) == [(3, 20.0), (10, 15.0)]


@given(st.lists(st.tuples(st.sampled_from([10.0, 15.0, 20.0, 22.0]), st.integers(1, 6)), min_size=1, max_size=8))
def test_events_match_run_length_scan(runs):
    v = np.concatenate([np.full(n, x) for x, n in runs])
    want = []
    end = -1
    for x, grp in itertools.groupby(v):
        end += len(list(grp))
        want.append((end, float(x)))
    assert segment_events(v) == want


def test_flat_road_at_the_limit_is_all_cruise(p):
    N = 20
    h = _flat(N)
    cfg = SolverConfig(N=N)
    w = generate(22.0, h, cfg, p)
    assert w.feasible
    assert all(mg.mode is M.CRUISE for mg in w.sequence)
    assert len(set(w.sequence)) == 1
    r = rollout(22.0, w.sequence, h, cfg, p)
    assert np.all(w.velocities == 22.0)
    assert w.cost == r.total == r.g
    assert math.isclose(w.cost, N * r.stage[0], rel_tol=1e-12)


def _latest_braking_start(h, v_top, p):
    """Independent backward pass: highest velocity at each node from which
    the drop can still be followed with real modes (fine velocity grid)."""
    N = h.N
    ref = np.array(h.v_max, dtype=float)
    for i in range(N - 1, -1, -1):
        grid = np.linspace(h.v_min[i], ref[i], 4001)
        tab = mode_table(grid, float(h.alpha[i]), p)
        nxt = grid[:, None] + tab.dvds * h.ds
        ok = (tab.feasible & (nxt > 0) & (nxt >= h.v_min[i + 1]) & (nxt <= ref[i + 1])).any(axis=1)
        ref[i] = grid[np.flatnonzero(ok)[-1]]
    return int(np.flatnonzero(ref >= v_top)[-1])


def test_braking_before_a_drop_starts_late(p):
    toy = toy_vehicle(p, 2)
    N = 30
    v_max = np.where(np.arange(N + 1) < 22, 22.0, 15.0)
    h = tighten_bounds(Horizon(0.0, 25.0, np.zeros(N), np.full(N + 1, 10.0), v_max), toy)
    cfg = SolverConfig(N=N)
    w = generate(22.0, h, cfg, toy)
    assert w.feasible
    assert check_sequence(22.0, w.sequence, h, toy) == []
    assert np.all(w.velocities[22:] <= 15.0)
    start = int(np.flatnonzero(w.velocities < 22.0)[0]) - 1
    latest = _latest_braking_start(h, 22.0, toy)
    assert latest - 1 <= start <= latest
    # once braking starts the velocity only goes down until the new limit
    assert np.all(np.diff(w.velocities[start:22]) <= 0)


def test_impossible_bounds_give_infinite_bound(p):
    h = Horizon(0.0, 25.0, np.zeros(2), np.array([20.0, 20.4, 10.0]), np.array([20.0, 20.41, 25.0]))
    w = generate(20.0, h, SolverConfig(N=2), p)
    assert not w.feasible
    assert w.cost == math.inf and w.sequence == [] and w.note


def test_disabled_generator():
    h = _flat(3)
    w = no_warm_start(20.0, h, SolverConfig(N=3), None)
    assert w.cost == math.inf and w.sequence == [] and w.note == "disabled"


def test_cost_equals_recomputation_on_routes(p):
    for kind in ("hill", "stops", "mixed"):
        route = generate_route(kind, 5000.0, seed=4)
        for s0 in (0.0, 1250.0, 2500.0):
            h = tighten_bounds(resample(route, s0, 100, 25.0), p)
            cfg = SolverConfig(N=100)
            v0 = float(h.v_min[0] + 0.8 * (h.v_max[0] - h.v_min[0]))
            w = generate(v0, h, cfg, p)
            if not w.feasible:
                continue
            r = rollout(v0, w.sequence, h, cfg, p)
            assert math.isclose(w.cost, r.total, rel_tol=1e-9)
            assert check_sequence(v0, w.sequence, h, p) == []
            again = generate(v0, h, cfg, p)
            assert again.sequence == w.sequence and again.cost == w.cost


def test_prefix_is_replayed_while_feasible(p):
    h = _flat(10)
    cfg = SolverConfig(N=10)
    prefix = [ModeGear(M.COAST, 12), ModeGear(M.ECO_ROLL, 0), ModeGear(M.ACCELERATE, 11)]
    w = generate(20.0, h, cfg, p, prefix=prefix)
    assert w.feasible and w.sequence[:3] == prefix
    # a prefix mode that is infeasible at the reached state is skipped
    w2 = generate(20.0, h, cfg, p, prefix=[ModeGear(M.CRUISE, 1)])
    assert w2.feasible and w2.sequence[0] != ModeGear(M.CRUISE, 1)


def test_dead_end_before_a_stop_is_backtracked(p):
    # tracking the reference greedily ends at 1.75 m/s inside the stop zone,
    # from where no mode reaches the lower bound after it in one stage
    h = tighten_bounds(resample(generate_route("mixed", 1000.0, seed=1), 275.0, 20, 25.0), p)
    cfg = SolverConfig(N=20)
    w = generate(17.99194444753946, h, cfg, p)
    assert w.feasible
    assert check_sequence(17.99194444753946, w.sequence, h, p) == []
    assert math.isclose(w.cost, rollout(17.99194444753946, w.sequence, h, cfg, p).total, rel_tol=1e-12)
