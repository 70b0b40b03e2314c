"""Branch-and-bound over driving-mode sequences.

The tree is explored one stage at a time. Each level is branched completely
(nodes whose lower bound cannot beat the incumbent are dropped), the best new
node is probed greedily down to the last stage to refresh the incumbent, and
nodes whose velocities fall in the same ``epsilon`` bin are merged, keeping
the cheapest one.

Levels are stored as flat numpy arrays with parent indices into the previous
level, so a whole level is branched with a single call to the vectorised
mode table.

Tie-breaking is lexicographic everywhere: lower bound, then velocity, then
mode (enum order), then gear. The column order of the mode table is the
(mode, gear) order, so sorting by column index is the same as sorting by mode
then gear.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernel
from .heuristic import HeuristicLut, sample_h
from .ocp import SolverConfig
from .route import Horizon
from .vehicle import ModeGear, VehicleParams, combo_arrays, combos


class SearchInfeasible(RuntimeError):
    """Neither the search nor the warm start produced a feasible sequence."""

    def __init__(self, deepest_stage: int, N: int, reason: str):
        super().__init__(f"no feasible mode sequence (deepest stage reached {deepest_stage} of {N}; {reason})")
        self.deepest_stage = deepest_stage


@dataclass
class Node:
    stage: int
    v: float
    mode_gear: ModeGear | None
    g: float
    lb: float
    parent: "Node | None" = field(default=None, repr=False)

    def path(self) -> list["Node"]:
        out = []
        node = self
        while node is not None:
            out.append(node)
            node = node.parent
        return out[::-1]


@dataclass
class SolveResult:
    cost: float
    sequence: list[ModeGear]
    velocities: np.ndarray
    termination: str                 # "completed" | "time_limit"
    source: str                      # which step found the returned sequence
    stats: dict
    ub_history: list[tuple[int, float]]
    wall_time: float = 0.0
    best_leaf: Node | None = None
    tree: list[dict] | None = None   # expanded frontiers per stage (keep_tree=True)

    @property
    def first(self) -> ModeGear:
        return self.sequence[0]


class SearchContext:
    """Everything a solve needs that stays fixed during the search."""

    def __init__(self, horizon: Horizon, lut: HeuristicLut, cfg: SolverConfig, p: VehicleParams):
        self.horizon = horizon
        self.lut = lut
        self.cfg = cfg
        self.p = p
        self.N = horizon.N
        self.ds = horizon.ds
        self.alpha = [float(a) for a in horizon.alpha]
        self.lo = np.asarray(horizon.v_min, dtype=float)
        self.hi = np.asarray(horizon.v_max, dtype=float)
        self.v_f = cfg.terminal_velocity(horizon)
        self.w_f, self.w_t = cfg.w_f, cfg.w_t
        modes, gears = combo_arrays(p)
        self.modes, self.gears = modes.astype(np.int64), gears.astype(np.int64)
        self.combos = combos(p)
        self.K = len(self.combos)
        self._buf = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0), np.empty(0))

    def terminal(self, v):
        d = v - self.v_f
        return self.cfg.beta * (d * d)

    def children(self, v, g, k):
        """Feasible children of the nodes ``(v, g)`` at stage ``k``.

        A child is feasible when its mode-gear pair is feasible at the parent
        state and its velocity is positive and inside the bounds of node k + 1.
        Returns (parent index, combo index, v', g', number of rejected pairs).
        """
        v = np.ascontiguousarray(v, dtype=float).reshape(-1)
        g = np.ascontiguousarray(g, dtype=float).reshape(-1)
        size = v.size * self.K
        if self._buf[0].size < size:
            self._buf = (np.empty(size, dtype=np.int64), np.empty(size, dtype=np.int64),
                         np.empty(size), np.empty(size))
        c = _kernel.expand(v, g, self.alpha[k], float(self.ds), float(self.lo[k + 1]), float(self.hi[k + 1]),
                           self.w_f, self.w_t, self.modes, self.gears, self.p.packed, *self._buf)
        parent, combo, vn, g_next = (b[:c].copy() for b in self._buf)
        return parent, combo, vn, g_next, size - c

    def h(self, j, v):
        """Cost-to-go estimate at stage ``j``; exact terminal cost at the last stage."""
        return self.terminal(v) if j == self.N else sample_h(self.lut, j, v)

    def expand(self, v, g, k):
        """:meth:`children` plus the lower bound of every child."""
        parent, combo, vn, g_next, n_bad = self.children(v, g, k)
        return parent, combo, vn, g_next, g_next + self.h(k + 1, vn), n_bad


def _order(lb, v, combo):
    # lexicographic (lb, v, mode, gear); np.lexsort sorts by the last key first
    return np.lexsort((combo, v, lb))


def _group_first(keys):
    first = np.ones(keys.size, dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    return first


def _bin_keep(v, g, lb, combo, v_lo, epsilon):
    """Mask of the survivors of epsilon-bin elimination (lowest g per bin).

    Ties in g go to the lowest (lb, v, combo).
    """
    keep = np.zeros(v.size, dtype=bool)
    if v.size == 0:
        return keep
    if epsilon > 0:
        keep[_kernel.bin_keep(v, g, lb, combo, float(v_lo), float(epsilon))] = True
        return keep
    bins = v
    # cheap two-key pass for the minimum g of each bin, then the full
    # tie-break only among the rows that attain it
    order = np.lexsort((g, bins))
    b = bins[order]
    first = _group_first(b)
    group = np.cumsum(first) - 1
    g_min = g[order][first]
    cand = order[g[order] == g_min[group]]
    sub = cand[np.lexsort((combo[cand], v[cand], lb[cand], bins[cand]))]
    keep[sub[_group_first(bins[sub])]] = True
    return keep


def _best(lb, v, combo):
    """Index of the lexicographically smallest (lb, v, combo)."""
    cand = np.flatnonzero(lb == lb.min())
    if cand.size == 1:
        return int(cand[0])
    return int(cand[np.lexsort((combo[cand], v[cand]))[0]])


# -- operations on Node objects -----------------------------------------------------


def branch(node: Node, ctx: SearchContext) -> list[Node]:
    """All feasible children of ``node``, in canonical mode-gear order."""
    if node.stage >= ctx.N:
        raise ValueError("cannot branch a node at the final stage")
    _, combo, vn, gn, lb, _ = ctx.expand([node.v], [node.g], node.stage)
    return [Node(node.stage + 1, float(v), ctx.combos[c], float(g), float(b), node)
            for c, v, g, b in zip(combo, vn, gn, lb)]


def single_level_search(frontier: list[Node], ctx: SearchContext, k: int, UB: float) -> tuple[list[Node], float]:
    """Branch every frontier node; keep children with LB < UB.

    At the last level the children are complete sequences and the incumbent
    becomes the best of them.
    """
    children = []
    for node in frontier:
        for child in branch(node, ctx):
            if child.lb < UB:
                children.append(child)
                if k == ctx.N - 1:
                    UB = child.lb
    return children, UB


def greedy_probe(UB: float, best_child: Node, ctx: SearchContext) -> tuple[float, Node | None]:
    """Dive from ``best_child`` always taking the child of lowest LB.

    Returns the new incumbent and the leaf reached (None when the dive is
    aborted: no children, or the running LB exceeds UB).
    """
    node = best_child
    while node.stage < ctx.N:
        kids = branch(node, ctx)
        if not kids:
            return UB, None
        best = min(kids, key=lambda n: (n.lb, n.v, n.mode_gear.mode, n.mode_gear.gear))
        if best.lb > UB:
            return UB, None
        node = best
    return min(UB, node.lb), node


def context_eliminate(nodes: list[Node], v_min_k: float, v_max_k: float, epsilon: float) -> list[Node]:
    """Keep the node with the lowest g in every velocity bin of width ``epsilon``.

    Bin i covers (v_min + i eps, v_min + (i + 1) eps]; the first bin also
    holds v_min itself. With ``epsilon == 0`` only equal velocities merge.
    """
    if not nodes:
        return []
    v = np.array([n.v for n in nodes])
    g = np.array([n.g for n in nodes])
    lb = np.array([n.lb for n in nodes])
    combo = np.array([(int(n.mode_gear.mode), n.mode_gear.gear) for n in nodes])
    code = combo[:, 0] * 1000 + combo[:, 1]
    keep = _bin_keep(v, g, lb, code, v_min_k, epsilon)
    return [n for n, k in zip(nodes, keep) if k]


# -- the solver --------------------------------------------------------------------------


class _Incumbent:
    def __init__(self, cost, seq, vel, source):
        self.cost = cost
        self.seq = seq
        self.vel = vel
        self.source = source
        self.history = []


def solve(warm, v0: float, horizon: Horizon, lut: HeuristicLut, cfg: SolverConfig, p: VehicleParams,
          keep_tree: bool = False, clock: Callable[[], float] = time.perf_counter) -> SolveResult:
    """Solve the discrete problem from ``v0`` over ``horizon``.

    ``warm`` is a warm-start result (anything with ``cost``, ``sequence`` and
    ``velocities``); its cost is the initial upper bound and its sequence is
    returned if the search finds nothing better before the time limit.
    """
    t0 = clock()
    ctx = SearchContext(horizon, lut, cfg, p)
    N = ctx.N
    ub0 = float(warm.cost) if warm is not None else math.inf
    inc = _Incumbent(ub0, list(warm.sequence) if warm is not None and math.isfinite(ub0) else [],
                     np.asarray(warm.velocities) if warm is not None and math.isfinite(ub0) else None,
                     "warmstart")
    inc.history.append((0, ub0))
    stats = dict(levels=0, expanded=0, children=0, infeasible=0, pruned_bound=0, eliminated_bin=0,
                 probes=0, probe_steps=0, probe_improvements=0, max_frontier=1)

    grid = np.ascontiguousarray(lut.velocities, dtype=float)
    values = np.ascontiguousarray(lut.values, dtype=float)
    alpha = np.ascontiguousarray(horizon.alpha, dtype=float)
    P = p.packed
    beta, v_f = float(cfg.beta), float(ctx.v_f)
    path_combo = np.empty(N, dtype=np.int64)
    path_v = np.empty(N)

    # level arrays: v, g, lb, parent, combo
    levels = [dict(v=np.array([float(v0)]), g=np.array([0.0]), lb=np.array([0.0]),
                   parent=np.array([-1]), combo=np.array([-1]))]
    tree = [] if keep_tree else None
    termination = "completed"
    k = 0
    deepest = 0

    def probe(level, idx):
        stats["probes"] += 1
        status, lb, steps = _kernel.dive(
            level, float(levels[level]["v"][idx]), float(levels[level]["g"][idx]), inc.cost, ctx.ds, alpha,
            ctx.lo, ctx.hi, ctx.w_f, ctx.w_t, ctx.modes, ctx.gears, P, grid, values, beta, v_f,
            path_combo, path_v)
        stats["probe_steps"] += int(steps)
        if status == 0 and lb < inc.cost:
            seq, vel = _path(levels, level, idx, ctx)
            inc.cost = float(lb)
            inc.seq = seq + [ctx.combos[int(c)] for c in path_combo[:steps]]
            inc.vel = np.concatenate([vel, path_v[:steps]])
            inc.source = "probe"
            inc.history.append((level, float(lb)))
            stats["probe_improvements"] += 1

    while k < N:
        if clock() - t0 >= cfg.time_limit:
            termination = "time_limit"
            break
        cur = levels[k]
        if tree is not None:
            tree.append(dict(stage=k, v=cur["v"].copy(), g=cur["g"].copy()))
        n = cur["v"].size
        stats["expanded"] += n
        size = n * ctx.K
        buf = (np.empty(size, dtype=np.int64), np.empty(size, dtype=np.int64), np.empty(size), np.empty(size),
               np.empty(size))
        last = k + 1 == N
        c, n_feasible = _kernel.expand_bounded(
            cur["v"], cur["g"], alpha[k], ctx.ds, float(ctx.lo[k + 1]), float(ctx.hi[k + 1]), ctx.w_f, ctx.w_t,
            ctx.modes, ctx.gears, P, grid, values[min(k + 1, values.shape[0] - 1)], last, beta, v_f, inc.cost,
            *buf)
        parent, combo, vn, gn, lb = (x[:c] for x in buf)
        stats["infeasible"] += size - n_feasible
        stats["children"] += n_feasible
        stats["pruned_bound"] += n_feasible - c
        if c:
            deepest = k + 1
        nxt = dict(v=vn, g=gn, lb=lb, parent=parent, combo=combo)
        levels.append(nxt)
        best = _best(lb, vn, combo) if c else -1
        if last:
            if c and lb[best] < inc.cost:
                seq, vel = _path(levels, N, best, ctx)
                inc.cost, inc.seq, inc.vel, inc.source = float(lb[best]), seq, vel, "search"
                inc.history.append((N, float(lb[best])))
            stats["levels"] += 1
            k += 1
            break
        if c:
            probe(k + 1, best)
        keep = lb < inc.cost
        stats["pruned_bound"] += int(c - keep.sum())
        idx = np.flatnonzero(keep)
        keep_bins = _bin_keep(vn[idx], gn[idx], lb[idx], combo[idx], float(ctx.lo[k + 1]), cfg.epsilon)
        stats["eliminated_bin"] += int(keep_bins.size - keep_bins.sum())
        idx = idx[keep_bins]
        # survivors in (lb, v, combo) order
        idx = idx[_order(lb[idx], vn[idx], combo[idx])]
        for key in nxt:
            nxt[key] = np.ascontiguousarray(nxt[key][idx])
        stats["levels"] += 1
        stats["max_frontier"] = max(stats["max_frontier"], int(idx.size))
        k += 1
        if idx.size == 0:
            break

    wall = clock() - t0
    if not math.isfinite(inc.cost):
        reason = "time limit reached" if termination == "time_limit" else "search exhausted"
        raise SearchInfeasible(deepest, N, reason)
    return SolveResult(
        cost=inc.cost,
        sequence=inc.seq,
        velocities=np.asarray(inc.vel, dtype=float),
        termination=termination,
        source=inc.source,
        stats=stats,
        ub_history=inc.history,
        wall_time=wall,
        tree=tree,
    )


def _path(levels, level, idx, ctx: SearchContext) -> tuple[list[ModeGear], np.ndarray]:
    """Mode-gear sequence and velocities from the root to node ``idx`` of ``level``."""
    seq, vel = [], []
    j, i = level, int(idx)
    while j > 0:
        lv = levels[j]
        seq.append(ctx.combos[int(lv["combo"][i])])
        vel.append(float(lv["v"][i]))
        i = int(lv["parent"][i])
        j -= 1
    vel.append(float(levels[0]["v"][0]))
    return seq[::-1], np.array(vel[::-1])
