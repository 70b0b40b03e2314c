"""Discrete eco-driving optimal control problem: weights, step, costs, checks."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .route import Horizon
from .vehicle import (
    InfeasibleModeError,
    ModeGear,
    Reason,
    VehicleError,
    VehicleParams,
    combo_index,
    mode_dynamics,
    mode_feasible,
    mode_fuel_rate,
    mode_table,
)


class StallError(VehicleError):
    """The Euler step would bring the truck to (or below) standstill."""


@dataclass(frozen=True)
class SolverConfig:
    phi: float = 10.0
    beta: float = 10.0
    N: int = 200
    ds: float = 25.0
    v_f: float | None = None
    epsilon: float = 0.01
    time_limit: float = math.inf
    lut_velocity_step: float = 0.25

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError("phi must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be an integer >= 1")
        if not self.ds > 0:
            raise ValueError("ds must be > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.time_limit < 0:
            raise ValueError("time_limit must be >= 0")
        if not self.lut_velocity_step > 0:
            raise ValueError("lut_velocity_step must be > 0")

    @property
    def w_f(self) -> float:
        return 1.0 / (1.0 + self.phi)

    @property
    def w_t(self) -> float:
        return self.phi / (1.0 + self.phi)

    def replace(self, **changes) -> "SolverConfig":
        return dataclasses.replace(self, **changes)

    def terminal_velocity(self, horizon: Horizon) -> float:
        """v_f, defaulting to the upper bound at the last node of ``horizon``."""
        return float(horizon.v_max[-1]) if self.v_f is None else float(self.v_f)


@dataclass(frozen=True)
class StageCost:
    fuel: float      # g
    time: float      # s
    weighted: float


def weighted_cost(mdot, v_bar, ds, w_f, w_t):
    """Weighted stage cost from the fuel rate and the midpoint velocity.

    Shared by the scalar API, the search and the cost recomputation so that
    all three round identically.
    """
    return (w_f * (mdot / v_bar) + w_t / v_bar) * ds


def step(v_i: float, mg: ModeGear, alpha: float, ds: float, p: VehicleParams) -> float:
    """One forward-Euler step ``v + f(M, v) ds``."""
    if not v_i > 0:
        raise StallError("velocity must be > 0")
    tab = mode_table([v_i], alpha, p)
    k = combo_index(mg, p)
    if not tab.feasible[0, k]:
        raise InfeasibleModeError(mg, Reason(int(tab.reason[0, k])))
    v_next = float(v_i + tab.dvds[0, k] * ds)
    if not v_next > 0:
        raise StallError(f"{mg} stalls: v {v_i:.4f} -> {v_next:.4f} m/s over {ds} m")
    return v_next


def stage_cost(v_i: float, v_next: float, mg: ModeGear, alpha: float, cfg: SolverConfig,
               p: VehicleParams) -> StageCost:
    if not (v_i > 0 and v_next > 0):
        raise ValueError("velocities must be > 0")
    v_bar = 0.5 * (v_i + v_next)
    mdot = float(mode_fuel_rate(int(mg.mode), mg.gear, v_bar, alpha, p))
    return StageCost(
        fuel=mdot / v_bar * cfg.ds,
        time=cfg.ds / v_bar,
        weighted=float(weighted_cost(mdot, v_bar, cfg.ds, cfg.w_f, cfg.w_t)),
    )


def terminal_cost(v_N: float, cfg: SolverConfig, v_f: float | None = None) -> float:
    v_f = cfg.v_f if v_f is None else v_f
    if v_f is None:
        raise ValueError("terminal velocity reference is not set")
    d = v_N - v_f
    return cfg.beta * (d * d)


@dataclass(frozen=True)
class Rollout:
    """Velocities and per-stage costs of a mode-gear sequence."""

    v: np.ndarray           # N + 1 node velocities
    fuel: np.ndarray        # g per stage
    time: np.ndarray        # s per stage
    stage: np.ndarray       # weighted cost per stage
    g: float                # accumulated weighted stage cost
    total: float            # g + terminal cost


def rollout(v0: float, seq: Sequence[ModeGear], horizon: Horizon, cfg: SolverConfig,
            p: VehicleParams) -> Rollout:
    """Simulate a sequence from ``v0`` and recompute its cost from scratch.

    Raises if a mode is infeasible or stalls. Bounds are not checked here
    (see :func:`check_sequence`).
    """
    if len(seq) != horizon.N:
        raise ValueError(f"sequence has {len(seq)} stages, horizon has {horizon.N}")
    v = [float(v0)]
    fuel, time, stage = [], [], []
    g = 0.0
    for i, mg in enumerate(seq):
        a = float(horizon.alpha[i])
        v_next = step(v[-1], mg, a, horizon.ds, p)
        c = stage_cost(v[-1], v_next, mg, a, cfg, p)
        g += c.weighted
        v.append(v_next)
        fuel.append(c.fuel)
        time.append(c.time)
        stage.append(c.weighted)
    total = g + terminal_cost(v[-1], cfg, cfg.terminal_velocity(horizon))
    return Rollout(np.array(v), np.array(fuel), np.array(time), np.array(stage), g, total)


def sequence_cost(v0: float, seq: Sequence[ModeGear], horizon: Horizon, cfg: SolverConfig,
                  p: VehicleParams) -> float:
    return rollout(v0, seq, horizon, cfg, p).total


def check_sequence(v0: float, seq: Sequence[ModeGear], horizon: Horizon, p: VehicleParams,
                   tol: float = 0.0) -> list[str]:
    """Independent constraint audit of a sequence; returns a list of violations.

    Checks, stage by stage: mode feasibility (engine speed, torque, brake
    torque, downhill gating), positive speed, and the node bounds.
    """
    problems = []
    v = float(v0)
    if len(seq) != horizon.N:
        return [f"sequence length {len(seq)} != N = {horizon.N}"]
    for i, mg in enumerate(seq):
        a = float(horizon.alpha[i])
        ok, why = mode_feasible(mg, v, a, p)
        if not ok:
            problems.append(f"stage {i}: {mg} infeasible at v={v:.4f} ({why.name})")
            return problems
        v = v + mode_dynamics(mg, v, a, p) * horizon.ds
        if not v > 0:
            problems.append(f"stage {i}: stall")
            return problems
        lo, hi = horizon.v_min[i + 1], horizon.v_max[i + 1]
        if v < lo - tol or v > hi + tol:
            problems.append(f"node {i + 1}: v={v:.6f} outside [{lo:.6f}, {hi:.6f}]")
    return problems
