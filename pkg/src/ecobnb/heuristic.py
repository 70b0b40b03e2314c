"""Admissible cost-to-go estimate and its stage x velocity lookup table.

From a node at stage ``j`` with velocity ``v_i`` the remaining cost is bounded
below by an energy balance and a time term that only depend on two free
numbers, the mean velocity ``vh`` over the remaining stages and the final
velocity ``vN``::

    J = w_f max(0, dE) / (Q eta_opt) + w_t ds (N - j) / vh + beta (vN - v_f)^2
    dE = m vN^2 / 2 - m v_i^2 / 2 + W_d + (N - j) ds rho c_d A vh^2 / 2

``J`` is convex in ``(vh, vN)``. The minimum over the box is found exactly:
the separable minimiser of the ``dE >= 0`` branch and of the ``dE <= 0``
branch are checked first, and if neither lies in its own branch the optimum
sits on the curve ``dE = 0``, where ``J`` is a convex function of ``vN``
minimised by golden-section search.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernel
from .ocp import SolverConfig, terminal_cost
from .route import Horizon
from .vehicle import VehicleParams

LUT_SCHEMA = "lut/1"
_GOLDEN_ITERS = 80


@dataclass(frozen=True)
class _Terms:
    """Per-stage constants of the cost-to-go problem (arrays over j = 0..N-1)."""

    remaining: np.ndarray    # N - j
    w_d: np.ndarray          # rolling + grade work from j to N [J]
    c_air: np.ndarray        # (N - j) ds rho c_d A / 2
    vh_lo: np.ndarray
    vh_hi: np.ndarray
    vn_lo: float
    vn_hi: float
    v_f: float


def _terms(horizon: Horizon, cfg: SolverConfig, p: VehicleParams) -> _Terms:
    N, ds = horizon.N, horizon.ds
    a = np.asarray(horizon.alpha, dtype=float)
    per_stage = p.m * p.g * (p.c_rr * np.cos(a) + np.sin(a)) * ds
    w_d = np.cumsum(per_stage[::-1])[::-1]
    remaining = N - np.arange(N)
    mid_lo = 0.5 * (horizon.v_min[:-1] + horizon.v_min[1:])
    mid_hi = 0.5 * (horizon.v_max[:-1] + horizon.v_max[1:])
    vh_lo = np.cumsum(mid_lo[::-1])[::-1] / remaining
    vh_hi = np.cumsum(mid_hi[::-1])[::-1] / remaining
    return _Terms(
        remaining=remaining.astype(float),
        w_d=w_d,
        c_air=remaining * ds * 0.5 * p.rho_a * p.c_d * p.A_f,
        vh_lo=vh_lo,
        vh_hi=vh_hi,
        vn_lo=float(horizon.v_min[-1]),
        vn_hi=float(horizon.v_max[-1]),
        v_f=cfg.terminal_velocity(horizon),
    )


def cost_to_go(j: int, v_i, v_bar_h, v_N, horizon: Horizon, cfg: SolverConfig, p: VehicleParams):
    """J_iN for given mean velocity ``v_bar_h`` and final velocity ``v_N``."""
    N, ds = horizon.N, horizon.ds
    a = np.asarray(horizon.alpha[j:], dtype=float)
    w_d = np.sum(p.m * p.g * (p.c_rr * np.cos(a) + np.sin(a)) * ds)
    w_air = (N - j) * ds * 0.5 * p.rho_a * p.c_d * p.A_f * v_bar_h * v_bar_h
    d_e = 0.5 * p.m * v_N * v_N - 0.5 * p.m * v_i * v_i + w_d + w_air
    fuel = cfg.w_f * np.maximum(0.0, d_e) / (p.Q * p.eta_opt)
    return fuel + cfg.w_t * ds * (N - j) / v_bar_h + terminal_cost(v_N, cfg, cfg.terminal_velocity(horizon))


def _minimize(K, c, b, vh_lo, vh_hi, vn_lo, vn_hi, a, M, beta, v_f):
    """Elementwise min of a max(0, M n^2 + c u^2 - K) + b/u + beta (n - v_f)^2.

    ``u`` ranges over [vh_lo, vh_hi], ``n`` over [vn_lo, vn_hi]. All array
    arguments broadcast together.
    """
    K, c, b, vh_lo, vh_hi = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (K, c, b, vh_lo, vh_hi)))
    out = np.full(K.shape, np.inf)
    valid = (vh_lo <= vh_hi) & (vn_lo <= vn_hi) & (vh_lo > 0)

    def J(u, n):
        d = M * n * n + c * u * u - K
        return a * np.maximum(0.0, d) + b / u + beta * (n - v_f) ** 2, d

    # branch dE >= 0: separable, each factor convex
    with np.errstate(divide="ignore", invalid="ignore"):
        u_free = np.where(c > 0, np.cbrt(b / (2.0 * a * c)), np.inf)
    u_b = np.clip(u_free, vh_lo, vh_hi)
    n_b = np.clip(beta * v_f / (beta + a * M), vn_lo, vn_hi) if beta + a * M > 0 else vn_lo
    j_b, d_b = J(u_b, np.broadcast_to(n_b, K.shape))
    # branch dE <= 0: fastest mean velocity, final velocity at the reference
    n_a = float(np.clip(v_f, vn_lo, vn_hi))
    j_a, d_a = J(vh_hi, np.full(K.shape, n_a))

    done_b = valid & (d_b >= 0)
    out[done_b] = j_b[done_b]
    done_a = valid & ~done_b & (d_a <= 0)
    out[done_a] = j_a[done_a]
    rest = valid & ~done_b & ~done_a
    if not rest.any():
        return out

    # optimum on dE = 0, parametrised by n (u follows from n)
    Kr, cr, br = K[rest], c[rest], b[rest]
    ul, uh = vh_lo[rest], vh_hi[rest]
    n2_lo = np.maximum((Kr - cr * uh * uh) / M, vn_lo * vn_lo)
    n2_hi = np.minimum((Kr - cr * ul * ul) / M, vn_hi * vn_hi)
    lo = np.sqrt(np.maximum(n2_lo, 0.0))
    hi = np.sqrt(np.maximum(n2_hi, 0.0))
    lo = np.maximum(lo, vn_lo)
    hi = np.minimum(np.maximum(hi, lo), vn_hi)

    def on_curve(n):
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(cr > 0, np.sqrt(np.maximum(Kr - M * n * n, 0.0) / np.where(cr > 0, cr, 1.0)), uh)
        u = np.clip(u, ul, uh)
        return J_rest(u, n)

    def J_rest(u, n):
        d = M * n * n + cr * u * u - Kr
        return a * np.maximum(0.0, d) + br / u + beta * (n - v_f) ** 2

    r = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - r * (hi - lo)
    x2 = lo + r * (hi - lo)
    f1, f2 = on_curve(x1), on_curve(x2)
    best = np.minimum(np.minimum(on_curve(lo), on_curve(hi)), np.minimum(f1, f2))
    for _ in range(_GOLDEN_ITERS):
        left = f1 <= f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        nx1 = np.where(left, hi - r * (hi - lo), x2)
        nx2 = np.where(left, x1, lo + r * (hi - lo))
        fn = on_curve(np.where(left, nx1, nx2))
        f1, f2 = np.where(left, fn, f2), np.where(left, f1, fn)
        x1, x2 = nx1, nx2
        best = np.minimum(best, fn)
    out[rest] = best
    return out


def _problem(horizon: Horizon, cfg: SolverConfig, p: VehicleParams):
    t = _terms(horizon, cfg, p)
    consts = dict(a=cfg.w_f / (p.Q * p.eta_opt), M=0.5 * p.m, beta=cfg.beta, v_f=t.v_f,
                  vn_lo=t.vn_lo, vn_hi=t.vn_hi)
    return t, consts


def minimize_cost_to_go(j: int, v_i, horizon: Horizon, cfg: SolverConfig, p: VehicleParams):
    """h(j, v_i): minimum of :func:`cost_to_go` over the admissible box.

    Accepts an array of velocities. Returns +inf where the box is empty.
    """
    N = horizon.N
    v_i = np.asarray(v_i, dtype=float)
    if not 0 <= j <= N:
        raise ValueError(f"stage {j} outside 0..{N}")
    if j == N:
        d = v_i - cfg.terminal_velocity(horizon)
        return cfg.beta * (d * d)
    t, k = _problem(horizon, cfg, p)
    K = 0.5 * p.m * v_i * v_i - t.w_d[j]
    out = _minimize(K, t.c_air[j], cfg.w_t * horizon.ds * t.remaining[j], t.vh_lo[j], t.vh_hi[j], **k)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class HeuristicLut:
    """h on a regular grid: ``values[j, k]`` is h at stage j, velocity ``velocities[k]``.

    Entries that are not needed to sample inside the stage's bounds are +inf.
    """

    velocities: np.ndarray
    values: np.ndarray
    step: float

    @property
    def N(self) -> int:
        return self.values.shape[0] - 1

    def sample(self, j: int, v):
        """Conservative lookup: the smaller of the two bracketing grid values."""
        return sample_h(self, j, v)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {LUT_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "velocity_mps", "h"])
        for j in range(self.values.shape[0]):
            for v, h in zip(self.velocities, self.values[j]):
                w.writerow([j, repr(float(v)), repr(float(h))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def velocity_grid(horizon: Horizon, step: float) -> np.ndarray:
    lo = np.floor(float(np.min(horizon.v_min)) / step)
    hi = np.ceil(float(np.max(horizon.v_max)) / step)
    return step * np.arange(lo, hi + 1)


def build_lut(horizon: Horizon, cfg: SolverConfig, p: VehicleParams) -> HeuristicLut:
    """Tabulate h for every stage 0..N on a velocity grid of ``cfg.lut_velocity_step``."""
    step = cfg.lut_velocity_step
    grid = velocity_grid(horizon, step)
    N = horizon.N
    t, k = _problem(horizon, cfg, p)
    K = 0.5 * p.m * grid[None, :] * grid[None, :] - t.w_d[:, None]
    col = (slice(None), None)
    values = np.empty((N + 1, grid.size))
    values[:N] = _minimize(K, t.c_air[col], (cfg.w_t * horizon.ds * t.remaining)[col],
                           t.vh_lo[col], t.vh_hi[col], **k)
    d = grid - t.v_f
    values[N] = cfg.beta * (d * d)
    # keep only the grid points that bracket [v_min_j, v_max_j]
    first = np.searchsorted(grid, horizon.v_min, side="right") - 1
    last = np.searchsorted(grid, horizon.v_max, side="left")
    idx = np.arange(grid.size)
    outside = (idx[None, :] < first[:, None]) | (idx[None, :] > last[:, None])
    values[outside] = np.inf
    return HeuristicLut(velocities=grid, values=values, step=step)


def sample_h(lut: HeuristicLut, j: int, v):
    """h at stage ``j`` for velocities ``v``; +inf outside the grid.

    On a grid point the entry is returned as is; between two grid points the
    smaller neighbour is used, which keeps h a lower bound.
    """
    arr = np.asarray(v, dtype=float)
    out = _kernel.sample(lut.velocities, lut.values[j], np.ascontiguousarray(arr.reshape(-1)))
    return out.reshape(arr.shape) if arr.ndim else float(out[0])


def load_lut_csv(path) -> HeuristicLut:
    rows = [r for r in csv.reader(line for line in Path(path).read_text().splitlines() if not line.startswith("#"))]
    data = np.array([[float(x) for x in r] for r in rows[1:]])
    stages = data[:, 0].astype(int)
    grid = np.unique(data[:, 1])
    values = data[:, 2].reshape(stages.max() + 1, grid.size)
    step = float(grid[1] - grid[0]) if grid.size > 1 else 1.0
    return HeuristicLut(grid, values, step)
