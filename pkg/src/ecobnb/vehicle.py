"""Longitudinal heavy-duty truck model in the space domain.

The truck is driven through one of six driving modes. Each mode fixes the
continuous inputs (engine torque, engine-brake torque), so for a given gear
the only state is the velocity ``v`` and the dynamics are ``dv/ds = f(M, v)``.

All functions accept numpy arrays and broadcast. The scalar API
(:func:`mode_dynamics`, :func:`mode_fuel_per_meter`, ...) goes through the same
vectorised kernel (:func:`mode_table`) that the search uses, so a scalar
evaluation and a batched one agree bit for bit.

Units: SI everywhere except engine speed, which is in rpm, and fuel, which is
in grams.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import _kernel

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class DrivingMode(IntEnum):
    CRUISE = 0
    ECO_ROLL = 1
    COAST = 2
    ENGINE_BRAKE = 3
    ACCELERATE = 4
    DOWNHILL = 5

    @property
    def label(self) -> str:
        return _MODE_LABELS[self]


_MODE_LABELS = {
    DrivingMode.CRUISE: "Cruise",
    DrivingMode.ECO_ROLL: "EcoRoll",
    DrivingMode.COAST: "Coast",
    DrivingMode.ENGINE_BRAKE: "EngineBrake",
    DrivingMode.ACCELERATE: "Accelerate",
    DrivingMode.DOWNHILL: "Downhill",
}


class Reason(IntEnum):
    """Why a mode-gear combination is infeasible at a state."""

    OK = 0
    OMEGA_MIN = 1
    OMEGA_MAX = 2
    TORQUE_MAX = 3
    BRAKE_MAX = 4
    NO_TRACTION = 5
    DOWNHILL_DISABLED = 6
    BAD_GEAR = 7


class VehicleError(ValueError):
    pass


class ConfigError(VehicleError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class InfeasibleModeError(VehicleError):
    def __init__(self, mg: "ModeGear", reason: Reason):
        super().__init__(f"{mg} infeasible ({reason.name})")
        self.mode_gear = mg
        self.reason = reason


@dataclass(frozen=True, order=True)
class ModeGear:
    mode: DrivingMode
    gear: int

    def __post_init__(self):
        object.__setattr__(self, "mode", DrivingMode(self.mode))
        if self.mode is DrivingMode.ECO_ROLL and self.gear != 0:
            raise VehicleError("EcoRoll requires neutral (gear 0)")
        if self.mode is not DrivingMode.ECO_ROLL and self.gear < 1:
            raise VehicleError(f"{self.mode.label} requires a gear >= 1")

    def __str__(self):
        return f"{self.mode.label}/{self.gear}"


def _as_table(rows) -> tuple[tuple[float, float], ...]:
    return tuple((float(a), float(b)) for a, b in rows)


@dataclass(frozen=True)
class VehicleParams:
    m: float
    rho_a: float
    c_d: float
    A_f: float
    g: float
    c_rr: float
    r_w: float
    i_r: float
    eta_r: float
    gears: tuple[float, ...]
    J_dt: float
    J_pt: tuple[float, ...]
    omega_idle: float
    mdot_f_idle: float
    fuel_coeffs: tuple[float, ...]
    tloss_coeffs: tuple[tuple[float, float, float], ...]
    T_in_fr: tuple[tuple[float, float], ...]
    T_e_max: tuple[tuple[float, float], ...]
    T_eb_max: tuple[tuple[float, float], ...]
    omega_min: float
    omega_max: float
    Q: float
    eta_opt: float
    name: str = field(default="vehicle", compare=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "gears", tuple(float(x) for x in self.gears))
        set_(self, "J_pt", tuple(float(x) for x in self.J_pt))
        set_(self, "fuel_coeffs", tuple(float(x) for x in self.fuel_coeffs))
        set_(self, "tloss_coeffs", tuple(tuple(float(c) for c in row) for row in self.tloss_coeffs))
        for key in ("T_in_fr", "T_e_max", "T_eb_max"):
            set_(self, key, _as_table(getattr(self, key)))
        self._validate()

    def _validate(self):
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(key, msg)

        for key in ("m", "r_w", "rho_a", "A_f", "g", "i_r", "Q", "omega_idle"):
            need(getattr(self, key) > 0, key, "must be > 0")
        for key in ("c_d", "c_rr", "J_dt", "mdot_f_idle"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        need(0 < self.eta_r <= 1, "eta_r", "must lie in (0, 1]")
        need(0 < self.eta_opt < 1, "eta_opt", "must lie in (0, 1)")
        n = len(self.gears)
        need(n >= 1, "gears", "at least one gear required")
        need(all(r > 0 for r in self.gears), "gears", "ratios must be > 0")
        need(all(a > b for a, b in zip(self.gears, self.gears[1:])), "gears", "ratios must strictly decrease")
        need(self.gears[-1] == 1.0, "gears", "top gear must be direct drive (ratio 1)")
        need(len(self.J_pt) == n, "J_pt", f"expected {n} values, one per gear")
        need(all(j >= 0 for j in self.J_pt), "J_pt", "must be >= 0")
        need(len(self.tloss_coeffs) == n, "tloss_coeffs", f"expected {n} rows, one per gear")
        need(all(len(r) == 3 for r in self.tloss_coeffs), "tloss_coeffs", "rows are [c1, c2, c3]")
        need(all(r[1] < 1 for r in self.tloss_coeffs), "tloss_coeffs", "c2 must be < 1")
        need(len(self.fuel_coeffs) == 6, "fuel_coeffs", "expected c4..c9 (6 values)")
        need(0 < self.omega_min < self.omega_max, "omega_min", "need 0 < omega_min < omega_max")
        for key in ("T_in_fr", "T_e_max", "T_eb_max"):
            tab = getattr(self, key)
            need(len(tab) >= 2, key, "need at least two (rpm, Nm) pairs")
            w = [r[0] for r in tab]
            need(all(a < b for a, b in zip(w, w[1:])), key, "rpm column must strictly increase")
        checks = np.unique(np.concatenate([
            [self.omega_min, self.omega_max],
            [r[0] for r in self.T_e_max + self.T_eb_max if self.omega_min <= r[0] <= self.omega_max],
        ]))
        need(np.all(np.interp(checks, *zip(*self.T_e_max)) > 0), "T_e_max", "must be > 0 on [omega_min, omega_max]")
        need(np.all(np.interp(checks, *zip(*self.T_eb_max)) >= 0), "T_eb_max", "must be >= 0 on [omega_min, omega_max]")

    # -- array views ---------------------------------------------------------

    @property
    def n_gears(self) -> int:
        return len(self.gears)

    @cached_property
    def gear_arr(self) -> np.ndarray:
        return np.array(self.gears)

    @cached_property
    def jpt_arr(self) -> np.ndarray:
        return np.array(self.J_pt)

    @cached_property
    def tloss_arr(self) -> np.ndarray:
        return np.array(self.tloss_coeffs)

    @cached_property
    def _tables(self):
        return {k: tuple(np.array(c) for c in zip(*getattr(self, k))) for k in ("T_in_fr", "T_e_max", "T_eb_max")}

    def friction_torque(self, omega):
        return np.interp(omega, *self._tables["T_in_fr"])

    def max_torque(self, omega):
        return np.interp(omega, *self._tables["T_e_max"])

    def max_brake_torque(self, omega):
        return np.interp(omega, *self._tables["T_eb_max"])

    @cached_property
    def packed(self) -> tuple:
        """Parameters in the flat form used by the compiled mode kernel."""
        return _kernel.pack(self)

    # -- derived engine quantities ------------------------------------------

    @cached_property
    def max_engine_power(self) -> tuple[float, float]:
        """(P_e,max [W], rpm at which it occurs) subject to speed and torque limits."""
        return _max_power(self.max_torque, [r[0] for r in self.T_e_max], self.omega_min, self.omega_max)

    @property
    def P_e_max(self) -> float:
        return self.max_engine_power[0]

    @cached_property
    def P_b_max(self) -> float:
        """Largest braking power of engine friction plus engine brake [W]."""
        def brake(w):
            return self.friction_torque(w) + self.max_brake_torque(w)

        knots = [r[0] for r in self.T_in_fr] + [r[0] for r in self.T_eb_max]
        return _max_power(brake, knots, self.omega_min, self.omega_max)[0]

    @cached_property
    def bsfc_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(power [W], rpm, torque [Nm]) along the optimal BSFC line."""
        p_max, w_at_max = self.max_engine_power
        powers = np.linspace(p_max / 200, p_max, 200)
        omegas = np.empty_like(powers)
        for k, P in enumerate(powers[:-1]):
            omegas[k] = _bsfc_optimal_speed(P, self)
        omegas[-1] = w_at_max
        torques = 30.0 * powers / (np.pi * omegas)
        return powers, omegas, torques

    @cached_property
    def _ef_line(self) -> tuple[np.ndarray, np.ndarray]:
        _, w, t = self.bsfc_table
        # at very low power the line bends back to higher speeds; only the
        # branch from its slowest point up to max power is used, and the
        # highest torque per speed keeps T_e,ef(omega) single valued
        k0 = len(w) - 1 - int(np.argmin(w[::-1]))
        w, t = w[k0:], t[k0:]
        w_mono = np.maximum.accumulate(w)
        uniq, idx = np.unique(w_mono, return_index=True)
        top = np.array([t[w_mono == u].max() for u in uniq])
        return uniq, top

    def ef_torque(self, omega):
        """Engine torque applied in Accelerate mode at engine speed ``omega``.

        Follows the optimal BSFC line; above the line's end (the max-power
        speed) the engine runs at full load.
        """
        w_line, t_line = self._ef_line
        omega = np.asarray(omega, dtype=float)
        on_line = np.interp(omega, w_line, t_line)
        full = self.max_torque(omega)
        return np.minimum(np.where(omega > w_line[-1], full, on_line), full)

    @cached_property
    def peak_engine_efficiency(self) -> float:
        """Best brake efficiency P_e / (mdot_f Q) over the feasible map (dense grid)."""
        w = np.linspace(self.omega_min, self.omega_max, 561)
        frac = np.linspace(0.002, 1.0, 500)
        W, Fr = np.meshgrid(w, frac)
        T = Fr * self.max_torque(W)
        eff = (np.pi / 30.0) * T * W / (fuel_rate(T, W, self) * self.Q)
        return float(eff.max())

    # -- helpers -------------------------------------------------------------

    def with_gears(self, indices) -> "VehicleParams":
        """Toy vehicle keeping only gears ``indices`` (1-based, ascending)."""
        idx = [i - 1 for i in indices]
        return dataclasses.replace(
            self,
            gears=[self.gears[i] for i in idx],
            J_pt=[self.J_pt[i] for i in idx],
            tloss_coeffs=[self.tloss_coeffs[i] for i in idx],
            name=f"{self.name}[{','.join(map(str, indices))}]",
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: ([list(r) for r in v] if v and isinstance(v[0], tuple) else list(v)) if isinstance(v, tuple) else v
                for k, v in d.items()}


def _max_power(torque_fn, knots, lo, hi) -> tuple[float, float]:
    pts = {lo, hi}
    pts.update(k for k in knots if lo < k < hi)
    edges = sorted(pts)
    cands = list(edges)
    for a, b in zip(edges, edges[1:]):
        ta, tb = float(torque_fn(a)), float(torque_fn(b))
        slope = (tb - ta) / (b - a)
        if slope < 0:
            # torque = ta + slope (w - a); power ~ w * torque peaks at:
            w_star = (slope * a - ta) / (2 * slope)
            if a < w_star < b:
                cands.append(w_star)
    best = max(cands, key=lambda w: float(torque_fn(w)) * w)
    return float(np.pi / 30.0 * float(torque_fn(best)) * best), float(best)


def _iso_power_interval(P, p: VehicleParams) -> tuple[float, float]:
    """Engine-speed interval on which power P is deliverable within T_e,max."""
    p_max, w_star = p.max_engine_power

    def margin(w):
        return np.pi / 30.0 * float(p.max_torque(w)) * w - P

    if P > p_max:
        raise VehicleError(f"power {P:.1f} W exceeds P_e,max {p_max:.1f} W")
    lo = p.omega_min if margin(p.omega_min) >= 0 else brentq(margin, p.omega_min, w_star, xtol=1e-10)
    hi = p.omega_max if margin(p.omega_max) >= 0 else brentq(margin, w_star, p.omega_max, xtol=1e-10)
    return lo, hi


def _bsfc_optimal_speed(P, p: VehicleParams) -> float:
    lo, hi = _iso_power_interval(P, p)
    if hi - lo < 1e-9:
        return lo

    def bsfc(w):
        return float(fuel_rate(30.0 * P / (np.pi * w), w, p)) / P

    grid = np.linspace(lo, hi, 101)
    vals = [bsfc(w) for w in grid]
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, 100)]
    res = minimize_scalar(bsfc, bounds=(a, b), method="bounded", options={"xatol": 1e-8})
    return float(res.x) if res.fun <= vals[k] else float(grid[k])


# -- component models ---------------------------------------------------------


def resistance_force(v, alpha, p: VehicleParams):
    """Aerodynamic drag plus rolling and grade resistance [N]."""
    return 0.5 * p.rho_a * p.c_d * p.A_f * v * v + p.m * p.g * p.c_rr * np.cos(alpha) + p.m * p.g * np.sin(alpha)


def _loss(T, omega, c1, c2, c3):
    return np.maximum(c1 * omega + c2 * T + c3, 0.0)


def _check_gear(gear, p):
    g = np.asarray(gear)
    if np.any((g < 1) | (g > p.n_gears)):
        raise VehicleError(f"gear must be in 1..{p.n_gears}, got {gear}")


def transmission_loss(T, omega, gear, p: VehicleParams):
    """Gearbox torque loss [Nm] for transferred torque magnitude T, clamped at 0."""
    _check_gear(gear, p)
    c = p.tloss_arr[np.asarray(gear) - 1]
    return _loss(np.abs(T), omega, c[..., 0], c[..., 1], c[..., 2])


def transmission_efficiency(T, omega, gear, p: VehicleParams):
    """Gearbox efficiency 1 - T_loss/|T|, clamped to [0, 1]."""
    T = np.abs(np.asarray(T, dtype=float))
    loss = transmission_loss(T, omega, gear, p)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        eta = np.where(T > 0, 1.0 - loss / T, 0.0)
    return np.clip(eta, 0.0, 1.0)


def _net_torque(T, omega, c1, c2, c3):
    # eta_t * |T| with the loss capped at the transferred torque
    return T - np.minimum(_loss(T, omega, c1, c2, c3), T)


def _torque_for_net(target, omega, c1, c2, c3):
    """Gearbox input torque whose net output is ``target`` (>= 0)."""
    t1 = (target + c1 * omega + c3) / (1.0 - c2)
    return np.where(c1 * omega + c2 * t1 + c3 < 0.0, target, t1)


def engine_speed(gear, v, p: VehicleParams):
    """Engine speed [rpm]; idle in neutral."""
    gear = np.asarray(gear)
    it = np.where(gear > 0, p.gear_arr[np.clip(gear, 1, p.n_gears) - 1], 1.0)
    return np.where(gear == 0, p.omega_idle, _omega(it, v, p))


def _omega(it, v, p):
    return 30.0 * it * p.i_r * v / (np.pi * p.r_w)


def fuel_rate(T_e, omega, p: VehicleParams):
    """Fuel mass flow [g/s] from the quadratic fuel-map fit, clamped at 0."""
    c4, c5, c6, c7, c8, c9 = p.fuel_coeffs
    return np.maximum(c4 + c5 * omega + c6 * T_e + c7 * omega * omega + c8 * omega * T_e + c9 * T_e * T_e, 0.0)


def bsfc_optimal_torque(P_e: float, p: VehicleParams) -> tuple[float, float]:
    """Torque and speed on the optimal BSFC line delivering power ``P_e`` [W]."""
    if not P_e > 0:
        raise VehicleError("power must be > 0")
    if P_e > p.P_e_max * (1 + 1e-12):
        raise VehicleError(f"power {P_e:.1f} W exceeds P_e,max {p.P_e_max:.1f} W")
    P_e = min(P_e, p.P_e_max)
    powers, omegas, _ = p.bsfc_table
    lo, hi = _iso_power_interval(P_e, p)
    w = float(np.clip(np.interp(P_e, powers, omegas), lo, hi))
    return 30.0 * P_e / (np.pi * w), w


# -- driving modes --------------------------------------------------------------

MODE_ORDER = tuple(DrivingMode)


def combos(p: VehicleParams) -> list[ModeGear]:
    """All mode-gear pairs in canonical order (mode enum order, then gear)."""
    out = []
    for mode in MODE_ORDER:
        if mode is DrivingMode.ECO_ROLL:
            out.append(ModeGear(mode, 0))
        else:
            out.extend(ModeGear(mode, y) for y in range(1, p.n_gears + 1))
    return out


@dataclass
class ModeTable:
    """Every mode-gear combination evaluated at every velocity of a batch.

    Arrays have shape (n_velocities, n_combos); column order is :func:`combos`.
    """

    v: np.ndarray
    dvds: np.ndarray
    feasible: np.ndarray
    reason: np.ndarray
    torque: np.ndarray   # engine torque (Cruise/Accelerate) or engine-brake torque (Downhill)


def mode_table(v, alpha: float, p: VehicleParams) -> ModeTable:
    """Evaluate dynamics and feasibility of all mode-gear pairs at velocities ``v``."""
    v = np.ascontiguousarray(np.asarray(v, dtype=float).reshape(-1))
    dvds, feasible, reason, torque = _kernel.table(v, float(alpha), p.packed)
    return ModeTable(v=v, dvds=dvds, feasible=feasible, reason=reason, torque=torque)


def combo_index(mg: ModeGear, p: VehicleParams) -> int:
    if mg.mode is DrivingMode.ECO_ROLL:
        return p.n_gears
    if not 1 <= mg.gear <= p.n_gears:
        raise VehicleError(f"gear must be in 1..{p.n_gears}, got {mg.gear}")
    if mg.mode is DrivingMode.CRUISE:
        return mg.gear - 1
    # columns: cruise gears, eco-roll, then one block of gears per later mode
    return (int(mg.mode) - 1) * p.n_gears + mg.gear


def combo_arrays(p: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """(mode codes, gears) aligned with the :func:`mode_table` columns."""
    cs = combos(p)
    return np.array([c.mode for c in cs], dtype=np.int8), np.array([c.gear for c in cs], dtype=np.int16)


def mode_fuel_rate(modes, gears, v, alpha, p: VehicleParams):
    """Fuel mass flow [g/s] of each (mode, gear) at velocity ``v`` (elementwise)."""
    modes, gears, v = np.broadcast_arrays(np.asarray(modes, dtype=np.int64), np.asarray(gears, dtype=np.int64),
                                          np.asarray(v, dtype=float))
    shape = v.shape
    out = _kernel.fuel_many(modes.ravel().copy(), gears.ravel().copy(), v.ravel().copy(), float(alpha), p.packed)
    return out.reshape(shape) if shape else float(out[0])


def _single(mg: ModeGear, v, alpha, p) -> tuple[ModeTable, int]:
    if not v > 0:
        raise VehicleError("velocity must be > 0")
    return mode_table([v], alpha, p), combo_index(mg, p)


def mode_feasible(mg: ModeGear, v: float, alpha: float, p: VehicleParams) -> tuple[bool, Reason]:
    if mg.gear > p.n_gears:
        return False, Reason.BAD_GEAR
    tab, k = _single(mg, v, alpha, p)
    return bool(tab.feasible[0, k]), Reason(int(tab.reason[0, k]))


def mode_dynamics(mg: ModeGear, v: float, alpha: float, p: VehicleParams) -> float:
    """dv/ds [1/s] of a feasible mode-gear pair."""
    tab, k = _single(mg, v, alpha, p)
    if not tab.feasible[0, k]:
        raise InfeasibleModeError(mg, Reason(int(tab.reason[0, k])))
    return float(tab.dvds[0, k])


def mode_fuel_per_meter(mg: ModeGear, v: float, alpha: float, p: VehicleParams) -> float:
    """dm_f/ds [g/m] of a feasible mode-gear pair."""
    tab, k = _single(mg, v, alpha, p)
    if not tab.feasible[0, k]:
        raise InfeasibleModeError(mg, Reason(int(tab.reason[0, k])))
    return float(mode_fuel_rate(int(mg.mode), mg.gear, v, alpha, p) / v)


def downhill_brake_torque(gear: int, v: float, alpha: float, p: VehicleParams) -> float:
    """Engine-brake torque [Nm] that holds speed in Downhill mode."""
    mg = ModeGear(DrivingMode.DOWNHILL, gear)
    tab, k = _single(mg, v, alpha, p)
    reason = Reason(int(tab.reason[0, k]))
    if reason in (Reason.DOWNHILL_DISABLED, Reason.OMEGA_MIN, Reason.OMEGA_MAX):
        raise InfeasibleModeError(mg, reason)
    t_eb = float(tab.torque[0, k])
    if reason is Reason.BRAKE_MAX:
        raise InfeasibleModeError(mg, reason)
    return max(t_eb, 0.0)


def downhill_residual(gear: int, v: float, alpha: float, T_eb: float, p: VehicleParams) -> float:
    """dv/ds of the Downhill balance with a given engine-brake torque (0 when held)."""
    it = p.gears[gear - 1]
    w = float(_omega(it, v, p))
    c1, c2, c3 = p.tloss_coeffs[gear - 1]
    net = float(_net_torque(float(p.friction_torque(w)) + T_eb, w, c1, c2, c3))
    F = float(resistance_force(v, alpha, p))
    return -(p.eta_r * p.i_r * it * net / p.r_w + F) / (p.m * v)


# -- config files ---------------------------------------------------------------

_FIELDS = [f.name for f in dataclasses.fields(VehicleParams)]


def vehicle_from_dict(d: dict) -> VehicleParams:
    missing = [k for k in _FIELDS if k != "name" and k not in d]
    if missing:
        raise ConfigError(missing[0], "missing key")
    unknown = sorted(set(d) - set(_FIELDS) - {"note"})
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    kwargs = {k: d[k] for k in _FIELDS if k in d}
    try:
        return VehicleParams(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("?", str(exc)) from exc


def load_vehicle(path: str | Path | None = None) -> VehicleParams:
    """Load a vehicle config (TOML); ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("ecobnb.data").joinpath("default_vehicle.toml").read_text()
    else:
        text = Path(path).read_text()
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", str(exc)) from exc
    return vehicle_from_dict(d)


@lru_cache(maxsize=1)
def default_vehicle() -> VehicleParams:
    """The bundled representative tractor-trailer."""
    return load_vehicle()
