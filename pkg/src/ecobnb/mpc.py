"""Receding-horizon loop: plan over a window, apply the first stage, move on.

Each step resamples the route at the current position, tightens the bounds,
builds the heuristic table, computes a warm start, runs the search and drives
the first ``stride`` stages of the plan on the plant. The plant is the
prediction model itself, optionally with a velocity disturbance.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bnb import SearchInfeasible, solve
from .heuristic import build_lut
from .ocp import SolverConfig, StallError, stage_cost, step
from .route import Horizon, InfeasibleRouteError, RouteProfile, node_bounds, resample, tighten_bounds
from .vehicle import ModeGear, VehicleError, VehicleParams
from .warmstart import WarmStartGenerator, generate

TRAJECTORY_SCHEMA = "trajectory/1"
TRAJECTORY_HEADER = ("s_m", "v_mps", "v_end_mps", "mode", "gear", "fuel_cumulative_g", "time_cumulative_s")
STATS_SCHEMA = "mpc-stats/1"
STATS_FIELDS = ("step", "s_m", "v_mps", "N", "warm_cost", "cost", "source", "termination", "levels",
                "expanded", "children", "pruned_bound", "eliminated_bin", "max_frontier", "probes",
                "probe_improvements")
TIMING_FIELDS = ("solve_time_s", "step_time_s")


class MPCAborted(RuntimeError):
    """The loop could not continue; ``result`` holds everything up to that step."""

    def __init__(self, message: str, result: "MPCResult"):
        super().__init__(message)
        self.result = result


def _fmt(x) -> str:
    return repr(float(x))


@dataclass
class Trajectory:
    """Closed-loop (or simulated-driver) run sampled once per ``ds``.

    Row i covers [s[i], s[i] + ds]: velocity at both ends, the mode and gear
    applied over it and the fuel and time accumulated up to its end.
    """

    s: np.ndarray
    v: np.ndarray
    v_end: np.ndarray
    mode: list[str]
    gear: np.ndarray
    fuel_cumulative: np.ndarray
    time_cumulative: np.ndarray
    ds: float
    route: str = "route"
    source: str = "mpc"
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.s)

    @property
    def fuel_total(self) -> float:
        return float(self.fuel_cumulative[-1]) if len(self) else 0.0

    @property
    def time_total(self) -> float:
        return float(self.time_cumulative[-1]) if len(self) else 0.0

    @property
    def distance(self) -> float:
        return len(self) * self.ds

    def bound_violations(self, route: RouteProfile, tol: float = 1e-6) -> list[int]:
        """Rows whose start velocity leaves the node bounds the controller plans with."""
        lo, hi = node_bounds(route, self.s, self.ds)
        return [int(i) for i in np.flatnonzero((self.v < lo - tol) | (self.v > hi + tol))]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {TRAJECTORY_SCHEMA}\n# route: {self.route}\n# source: {self.source}\n"
                  f"# ds_m: {_fmt(self.ds)}\n")
        for w in self.warnings:
            buf.write(f"# warning: {w}\n")
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(TRAJECTORY_HEADER)
        for i in range(len(self)):
            out.writerow([_fmt(self.s[i]), _fmt(self.v[i]), _fmt(self.v_end[i]), self.mode[i], int(self.gear[i]),
                          _fmt(self.fuel_cumulative[i]), _fmt(self.time_cumulative[i])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def trajectory_from_rows(rows: Sequence[tuple], ds: float, route: str, source: str,
                         warnings: Sequence[str] = ()) -> Trajectory:
    """Build a trajectory from (s, v, v_end, mode, gear, fuel_cum, time_cum) rows."""
    cols = list(zip(*rows)) if rows else [()] * 7
    return Trajectory(
        s=np.array(cols[0], dtype=float),
        v=np.array(cols[1], dtype=float),
        v_end=np.array(cols[2], dtype=float),
        mode=list(cols[3]),
        gear=np.array(cols[4], dtype=int),
        fuel_cumulative=np.array(cols[5], dtype=float),
        time_cumulative=np.array(cols[6], dtype=float),
        ds=float(ds),
        route=route,
        source=source,
        warnings=list(warnings),
    )


def loads_trajectory(text: str) -> Trajectory:
    meta: dict[str, str] = {}
    warnings = []
    rows = []
    header = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            if key.strip() == "warning":
                warnings.append(val.strip())
            else:
                meta[key.strip()] = val.strip()
            continue
        cells = next(csv.reader([line]))
        if header is None:
            if tuple(cells) != TRAJECTORY_HEADER:
                raise ValueError(f"line {lineno}: expected header {','.join(TRAJECTORY_HEADER)}")
            header = cells
            continue
        try:
            s, v, ve, mode, gear, f, t = cells
            rows.append((float(s), float(v), float(ve), mode, int(gear), float(f), float(t)))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if meta.get("schema") != TRAJECTORY_SCHEMA:
        raise ValueError(f"unsupported trajectory schema {meta.get('schema')!r}")
    if "ds_m" not in meta:
        raise ValueError("missing ds_m")
    return trajectory_from_rows(rows, float(meta["ds_m"]), meta.get("route", "route"), meta.get("source", ""),
                                warnings)


def load_trajectory(path) -> Trajectory:
    return loads_trajectory(Path(path).read_text())


@dataclass
class MPCResult:
    trajectory: Trajectory
    stats: list[dict]
    plans: list[list[ModeGear]] = field(default_factory=list)

    def stats_csv(self, path=None, timing: bool = False) -> str:
        fields = STATS_FIELDS + (TIMING_FIELDS if timing else ())
        buf = io.StringIO()
        buf.write(f"# schema: {STATS_SCHEMA}\n# route: {self.trajectory.route}\n")
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(fields)
        for row in self.stats:
            out.writerow([_fmt(row[k]) if isinstance(row[k], float) else row[k] for k in fields])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _window(route: RouteProfile, s: float, N: int, ds: float) -> int:
    remaining = int(math.floor((route.length - s) / ds + 1e-9))
    return min(N, remaining)


def run_mpc(route: RouteProfile, cfg: SolverConfig, p: VehicleParams,
            warm_generator: WarmStartGenerator = generate, v0: float | None = None, *,
            search: bool = True, stride: int = 1, reuse: bool = False,
            disturbance: Callable[[int, float], float] | None = None,
            clock: Callable[[], float] = time.perf_counter,
            progress: Callable[[int, int], None] | None = None) -> MPCResult:
    """Drive ``route`` from ``s = 0`` to its end (in whole stages of ``cfg.ds``).

    ``search=False`` applies the warm-start plan without searching.
    ``stride`` stages of every plan are applied before the next replan.
    ``reuse`` keeps heuristic tables of identical windows and seeds each warm
    start with the unused tail of the previous plan.
    ``disturbance(step, v)`` may perturb the plant velocity after each stage.

    Raises :class:`MPCAborted` (carrying the trajectory so far) when a window
    is infeasible.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ds = cfg.ds
    n_total = int(math.floor(route.length / ds + 1e-9))
    if n_total < 1:
        raise ValueError(f"route ({route.length} m) is shorter than one stage ({ds} m)")
    v = float(node_bounds(route, 0.0, ds)[1][0]) if v0 is None else float(v0)
    rows: list[tuple] = []
    stats: list[dict] = []
    plans: list[list[ModeGear]] = []
    lut_cache: dict[bytes, object] = {}
    fuel = 0.0
    elapsed = 0.0
    tail: list[ModeGear] = []
    k = 0

    def result():
        return MPCResult(trajectory_from_rows(rows, ds, route.name, "mpc" if search else "warmstart"), stats, plans)

    while k < n_total:
        t_step = clock()
        s = k * ds
        N = _window(route, s, cfg.N, ds)
        wcfg = cfg.replace(N=N)
        try:
            horizon = tighten_bounds(resample(route, s, N, ds), p)
        except InfeasibleRouteError as exc:
            raise MPCAborted(f"step {k} (s = {s:g} m): {exc}", result()) from exc
        if not (horizon.v_min[0] - 1e-9 <= v <= horizon.v_max[0] + 1e-9):
            raise MPCAborted(f"step {k} (s = {s:g} m): v = {v:.4f} m/s outside the feasible set "
                             f"[{horizon.v_min[0]:.4f}, {horizon.v_max[0]:.4f}]", result())
        warm = warm_generator(v, horizon, wcfg, p, prefix=tail) if reuse else warm_generator(v, horizon, wcfg, p)
        if reuse and not warm.feasible and tail:
            warm = warm_generator(v, horizon, wcfg, p)
        t_solve = clock()
        if search:
            lut = _lut(horizon, wcfg, p, lut_cache if reuse else None)
            try:
                sol = solve(warm, v, horizon, lut, wcfg, p, clock=clock)
            except SearchInfeasible as exc:
                raise MPCAborted(f"step {k} (s = {s:g} m): {exc}", result()) from exc
            plan, cost, st = sol.sequence, sol.cost, sol.stats
            source, termination = sol.source, sol.termination
        else:
            if not warm.feasible:
                raise MPCAborted(f"step {k} (s = {s:g} m): warm start infeasible ({warm.note})", result())
            plan, cost, st = warm.sequence, warm.cost, {}
            source, termination = "warmstart", "completed"
        t_done = clock()
        plans.append(list(plan))
        n_apply = min(stride, len(plan), n_total - k)
        v_start = v
        for i in range(n_apply):
            mg = plan[i]
            a = float(horizon.alpha[i])
            try:
                v_next = step(v, mg, a, ds, p)
            except (VehicleError, StallError) as exc:
                raise MPCAborted(f"step {k} (s = {s:g} m): {exc}", result()) from exc
            c = stage_cost(v, v_next, mg, a, wcfg, p)
            fuel += c.fuel
            elapsed += c.time
            if disturbance is not None:
                v_next = float(disturbance(k, v_next))
            rows.append((s, v, v_next, mg.mode.label, mg.gear, fuel, elapsed))
            v = v_next
            k += 1
            s = k * ds
        tail = list(plan[n_apply:])
        stats.append(dict(
            step=len(stats), s_m=float(rows[-n_apply][0]), v_mps=float(v_start), N=N,
            warm_cost=float(warm.cost), cost=float(cost), source=source, termination=termination,
            levels=st.get("levels", 0), expanded=st.get("expanded", 0), children=st.get("children", 0),
            pruned_bound=st.get("pruned_bound", 0), eliminated_bin=st.get("eliminated_bin", 0),
            max_frontier=st.get("max_frontier", 0), probes=st.get("probes", 0),
            probe_improvements=st.get("probe_improvements", 0),
            solve_time_s=float(t_done - t_solve), step_time_s=float(clock() - t_step),
        ))
        if progress is not None:
            progress(k, n_total)
    return result()


def _lut(horizon: Horizon, cfg: SolverConfig, p: VehicleParams, cache: dict | None):
    if cache is None:
        return build_lut(horizon, cfg, p)
    key = b"".join(np.ascontiguousarray(a, dtype=float).tobytes()
                   for a in (horizon.alpha, horizon.v_min, horizon.v_max)) + repr((cfg.N, cfg.ds)).encode()
    if key not in cache:
        cache[key] = build_lut(horizon, cfg, p)
    return cache[key]
