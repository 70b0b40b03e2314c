"""Feasible initial mode sequence and upper bound for the search.

The default generator tracks a reference velocity: the upper bound, lowered
ahead of every drop so that the truck can still brake in time with the modes
it actually has. The horizon is thereby split into velocity events, one per
section of constant v_max, each ending at the section's last node. Every stage
takes the feasible mode whose next velocity is the highest one not above the
reference: accelerate towards the event velocity, cruise on the plateau, and
brake as gently as possible (coast before engine brake) where the reference
falls. A stage that leads into a dead end is revisited with its next choice,
within a fixed budget of visits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .bnb import SearchContext
from .ocp import SolverConfig, check_sequence, rollout
from .route import Horizon
from .vehicle import ModeGear, VehicleError, VehicleParams, mode_table

_REF_GRID = 96
_BACKTRACK_BUDGET = 20  # node visits per stage before giving up


@dataclass(frozen=True)
class WarmStartResult:
    sequence: list[ModeGear] = field(default_factory=list)
    velocities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cost: float = math.inf          # UB_0
    events: list[tuple[int, float]] = field(default_factory=list)
    note: str = ""

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.cost)

    @property
    def nodes(self) -> list[tuple[int, float]]:
        """(stage, velocity) of every node on the warm-start path."""
        return list(enumerate(map(float, self.velocities)))


class WarmStartGenerator(Protocol):
    def __call__(self, v0: float, horizon: Horizon, cfg: SolverConfig, p: VehicleParams,
                 prefix: Sequence[ModeGear] = ()) -> WarmStartResult:
        ...


def segment_events(v_max, v_f: float | None = None) -> list[tuple[int, float]]:
    """Velocity events of an upper-bound profile given per node (N + 1 values).

    One event per run of constant v_max: (last node of the run, v_max there).
    The final event is (N, v_f), with v_f defaulting to v_max[N].
    """
    v_max = np.asarray(v_max, dtype=float)
    N = v_max.size - 1
    change = np.flatnonzero(v_max[1:] != v_max[:-1])
    events = [(int(i), float(v_max[i])) for i in change]
    events.append((N, float(v_max[N]) if v_f is None else float(v_f)))
    return events


def reference_profile(horizon: Horizon, p: VehicleParams) -> np.ndarray:
    """Upper bound lowered so that braking modes can follow it stage by stage.

    Backward pass: a node may be at most the highest velocity (on a grid over
    its bounds) from which some feasible mode reaches the next node's
    reference without dropping below that node's lower bound.
    """
    N, ds = horizon.N, horizon.ds
    ref = np.asarray(horizon.v_max, dtype=float).copy()
    lo = np.asarray(horizon.v_min, dtype=float)
    for i in range(N - 1, -1, -1):
        if lo[i] > ref[i]:
            break
        grid = np.linspace(lo[i], ref[i], _REF_GRID)
        tab = mode_table(grid, float(horizon.alpha[i]), p)
        nxt = grid[:, None] + tab.dvds * ds
        ok = tab.feasible & (nxt > 0) & (nxt >= lo[i + 1]) & (nxt <= ref[i + 1])
        can = ok.any(axis=1)
        if can[-1]:
            continue
        if can.any():
            ref[i] = float(grid[np.flatnonzero(can)[-1]])
    return ref


def generate(v0: float, horizon: Horizon, cfg: SolverConfig, p: VehicleParams,
             prefix: Sequence[ModeGear] = ()) -> WarmStartResult:
    """Reference-tracking warm start; infinite cost when it gets stuck.

    The stages covered by ``prefix`` replay it (as long as each of its modes
    stays feasible), which lets a receding-horizon loop reuse the tail of
    its previous plan.
    """
    ctx = SearchContext(horizon, lut=None, cfg=cfg, p=p)
    events = segment_events(horizon.v_max, ctx.v_f)
    ref = reference_profile(horizon, p)
    index = {c: k for k, c in enumerate(ctx.combos)}
    N = horizon.N

    def ranked(i, v):
        """Children of (i, v) as (combo, next velocity), most preferred first."""
        _, combo, vn, gn, _ = ctx.children([v], [0.0], i)
        below = vn <= ref[i + 1]
        # highest next velocity under the reference, cheapest on ties; then
        # the lowest of those above it
        order = np.lexsort((combo, gn, np.where(below, -vn, vn), ~below))
        replay = index.get(prefix[i], -1) if i < len(prefix) else -1
        order = sorted(order, key=lambda k: combo[k] != replay)
        return [(int(combo[k]), float(vn[k])) for k in order]

    # depth-first along the preference order; the first complete path is the
    # plain greedy one whenever that one does not get stuck
    stack = [ranked(0, float(v0))]
    seq = []
    deepest, budget = 0, _BACKTRACK_BUDGET * N
    while stack and len(seq) < N and budget > 0:
        if not stack[-1]:
            stack.pop()
            if seq:
                seq.pop()
            continue
        budget -= 1
        combo, vn = stack[-1].pop(0)
        seq.append(ctx.combos[combo])
        deepest = max(deepest, len(seq))
        if len(seq) < N:
            stack.append(ranked(len(seq), vn))
    if len(seq) < N:
        return WarmStartResult(events=events, note=f"no feasible mode at stage {deepest}")
    try:
        roll = rollout(v0, seq, horizon, cfg, p)
    except VehicleError as exc:
        return WarmStartResult(events=events, note=str(exc))
    problems = check_sequence(v0, seq, horizon, p)
    if problems:
        return WarmStartResult(events=events, note=problems[0])
    return WarmStartResult(sequence=seq, velocities=roll.v, cost=roll.total, events=events)


def no_warm_start(v0: float, horizon: Horizon, cfg: SolverConfig, p: VehicleParams,
                  prefix: Sequence[ModeGear] = ()) -> WarmStartResult:
    """Generator that never supplies an initial solution (UB_0 = +inf)."""
    return WarmStartResult(events=segment_events(horizon.v_max, cfg.terminal_velocity(horizon)),
                           note="disabled")
