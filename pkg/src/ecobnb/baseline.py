"""Simulated human driver used as the fuel reference.

A PI controller tracks the speed limit, looking ahead over a speed-dependent
preview time so that it starts slowing down before a lower limit. Its output,
added to the torque that holds the current speed on level ground, is a
wheel-torque demand served by the engine (drive torque up to full load, drag
plus engine brake when negative); demand beyond the engine brake goes to the
service brake. Gears follow a threshold rule with a hysteresis band, and a
low gear is held on steep descents while the service brake is in use.

The simulation runs in time with step ``dt`` and is resampled onto the
distance grid, giving a :class:`~ecobnb.mpc.Trajectory` in the same schema as
the MPC loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mpc import Trajectory, trajectory_from_rows
from .route import RouteProfile, node_bounds
from .vehicle import VehicleParams, fuel_rate, resistance_force


@dataclass(frozen=True)
class DriverParams:
    K_p: float = 10000.0              # Nm per m/s
    K_i: float = 1.0                  # Nm per m
    preview_offset: float = 2.8       # s
    preview_slope: float = 0.25       # s per m/s
    upshift_rpm: float = 2000.0
    downshift_rpm: float = 1000.0
    dt: float = 0.1                   # s
    service_brake_decel: float = 3.0  # m/s^2, strongest service-brake deceleration
    hold_grade: float = -0.01         # slope (rise over run) below which a low gear is held

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.downshift_rpm < self.upshift_rpm:
            raise ValueError("downshift threshold must be below the upshift threshold")
        if self.K_p < 0 or self.K_i < 0:
            raise ValueError("gains must be >= 0")
        if self.preview_offset < 0 or self.preview_slope < 0:
            raise ValueError("preview constants must be >= 0")
        if not self.service_brake_decel > 0:
            raise ValueError("service_brake_decel must be > 0")


def preview_time(v0: float, v_prev_min: float, dp: DriverParams = DriverParams()) -> float:
    """Look-ahead time [s] for current speed ``v0`` and lowest previewed limit."""
    return dp.preview_offset + dp.preview_slope * max(v0 - v_prev_min, 0.0)


def _reference(route: RouteProfile, x: float, v: float, dp: DriverParams) -> float:
    """Lowest speed limit inside the preview window.

    A limit ``v_lim`` starting ``d`` metres ahead is inside the window when
    ``d <= v * preview_time(v, v_lim)``, so lower limits are seen earlier.
    """
    starts = route.s[:-1]
    limits = route._arrays["v_max"][:-1]
    k = int(route._segment(x))
    ref = float(limits[k])
    horizon = x + v * preview_time(v, 0.0, dp)
    for j in range(k + 1, len(starts)):
        d = starts[j] - x
        if starts[j] > horizon:
            break
        if limits[j] < ref and d <= v * preview_time(v, limits[j], dp):
            ref = float(limits[j])
    return ref


class _Engine:
    """Scalar engine and driveline relations for one vehicle."""

    def __init__(self, p: VehicleParams):
        self.p = p
        self.tables = {k: tuple(np.array(c) for c in zip(*getattr(p, k))) for k in ("T_in_fr", "T_e_max", "T_eb_max")}

    def interp(self, key: str, w: float) -> float:
        return float(np.interp(w, *self.tables[key]))

    def omega(self, gear: int, v: float) -> float:
        p = self.p
        return 30.0 * p.gears[gear - 1] * p.i_r * v / (math.pi * p.r_w)

    def wheel(self, gear: int) -> float:
        p = self.p
        return p.eta_r * p.i_r * p.gears[gear - 1]

    def net(self, T: float, w: float, gear: int) -> float:
        """Torque left after the gearbox loss for transferred magnitude ``T`` >= 0."""
        c1, c2, c3 = self.p.tloss_coeffs[gear - 1]
        return T - min(max(c1 * w + c2 * T + c3, 0.0), T)

    def gross(self, target: float, w: float, gear: int) -> float:
        """Transferred torque whose net value is ``target`` >= 0."""
        c1, c2, c3 = self.p.tloss_coeffs[gear - 1]
        t1 = (target + c1 * w + c3) / (1.0 - c2)
        return target if c1 * w + c2 * t1 + c3 < 0.0 else t1


def _initial_gear(eng: _Engine, v: float, dp: DriverParams) -> int:
    G = eng.p.n_gears
    for gear in range(G, 0, -1):
        if eng.omega(gear, v) >= dp.downshift_rpm:
            return gear
    return 1


def simulate_driver(route: RouteProfile, dp: DriverParams, p: VehicleParams, v0: float | None = None,
                    ds: float = 25.0) -> Trajectory:
    """Drive ``route`` with the PI driver and return the trajectory on the ``ds`` grid.

    ``v0`` defaults to the upper bound at the start. Leaving the velocity
    bounds is reported in ``Trajectory.warnings``, never raised.
    """
    if route.length < ds:
        raise ValueError(f"route ({route.length} m) is shorter than one stage ({ds} m)")
    eng = _Engine(p)
    G = p.n_gears
    v = float(node_bounds(route, 0.0, ds)[1][0]) if v0 is None else float(v0)
    if not v > 0:
        raise ValueError("v0 must be > 0")
    gear = _initial_gear(eng, v, dp)
    x = t = fuel = integ = 0.0
    xs, vs, ts, fs, gs, labels = [0.0], [v], [0.0], [0.0], [gear], []
    v_floor = 0.05
    while x < route.length:
        ref = _reference(route, x, v, dp)
        w = max(eng.omega(gear, v), p.omega_min)
        err = ref - v
        level = float(resistance_force(v, 0.0, p)) * p.r_w
        demand = level + dp.K_p * err + dp.K_i * integ
        wheel = eng.wheel(gear)
        drive_cap = wheel * eng.net(eng.interp("T_e_max", w), w, gear)
        drag = eng.interp("T_in_fr", w)
        brake_cap = wheel * eng.net(drag + eng.interp("T_eb_max", w), w, gear)
        u = min(max(demand, -brake_cap), drive_cap)
        saturated = u != demand
        if not saturated or (demand > u) != (err > 0):
            integ += err * dp.dt
        service = 0.0
        if demand < -brake_cap:
            service = min(-brake_cap - demand, p.m * dp.service_brake_decel * p.r_w) / p.r_w
        if u > 0:
            T_e = eng.gross(u / wheel, w, gear)
            force = wheel * eng.net(T_e, w, gear) / p.r_w
            mdot = float(fuel_rate(T_e, w, p))
            label = "Drive"
        else:
            force = -wheel * eng.net(-u / wheel, w, gear) / p.r_w if u < 0 else 0.0
            mdot = p.mdot_f_idle
            label = "Coast" if -u <= wheel * eng.net(drag, w, gear) else "EngineBrake"
        if service > 0:
            label = "ServiceBrake"
        alpha = float(route.grade_at(x))
        inertia = p.m + p.J_pt[gear - 1] / (p.r_w * p.r_w)
        acc = (force - service - float(resistance_force(v, alpha, p))) / inertia
        v_new = max(v + acc * dp.dt, v_floor)
        x += 0.5 * (v + v_new) * dp.dt
        v = v_new
        t += dp.dt
        fuel += mdot * dp.dt
        # gear shifts, one per step
        w_now = eng.omega(gear, v)
        hold = alpha < math.atan(dp.hold_grade) and service > 0
        if w_now > dp.upshift_rpm and gear < G and not hold:
            gear += 1
        elif w_now < dp.downshift_rpm and gear > 1:
            gear -= 1
        labels.append(label)
        xs.append(x)
        vs.append(v)
        ts.append(t)
        fs.append(fuel)
        gs.append(gear)
    return _resample(route, ds, np.array(xs), np.array(vs), np.array(ts), np.array(fs), gs, labels)


def _resample(route, ds, xs, vs, ts, fs, gs, labels) -> Trajectory:
    n = int(math.floor(route.length / ds + 1e-9))
    grid = ds * np.arange(n + 1)
    v = np.interp(grid, xs, vs)
    f = np.interp(grid, xs, fs)
    t = np.interp(grid, xs, ts)
    # sample the mode and gear in effect at each grid point
    idx = np.clip(np.searchsorted(xs, grid[:-1], side="right") - 1, 0, len(labels) - 1)
    rows = [(float(grid[k]), float(v[k]), float(v[k + 1]), labels[idx[k]], int(gs[idx[k]]),
             float(f[k + 1]), float(t[k + 1])) for k in range(n)]
    warnings = []
    lo, hi = node_bounds(route, grid[:-1], ds)
    below = v[:-1] < lo - 1e-6
    above = v[:-1] > hi + 1e-6
    if below.any():
        k = int(np.argmax(lo - v[:-1]))
        warnings.append(f"{int(below.sum())} rows below v_min (worst {lo[k] - v[k]:.3f} m/s at s = {grid[k]:g} m)")
    if above.any():
        k = int(np.argmax(v[:-1] - hi))
        warnings.append(f"{int(above.sum())} rows above v_max (worst {v[k] - hi[k]:.3f} m/s at s = {grid[k]:g} m)")
    return trajectory_from_rows(rows, ds, route.name, "baseline", warnings)
