"""Road preview: route files, resampling onto the solver grid, bound tightening.

A route is a list of points ``(s, alpha, v_min, v_max)`` with piecewise-constant
semantics: the values of a point hold from its ``s`` up to the next point. The
last point only marks the end of the route.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vehicle import VehicleParams, resistance_force

KMH = 1 / 3.6
STANDSTILL_SPEED = 10 * KMH
ROUTE_SCHEMA = "route/1"
ROUTE_HEADER = ("s_m", "grade_rad", "vmin_mps", "vmax_mps")


class RouteError(ValueError):
    pass


class RouteParseError(RouteError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TruncationError(RouteError):
    """The requested horizon runs past the end of the route."""


class InfeasibleRouteError(RouteError):
    def __init__(self, stage: int, v_min: float, v_max: float):
        super().__init__(f"stage {stage}: tightened v_min {v_min:.4f} > v_max {v_max:.4f}")
        self.stage = stage


@dataclass(frozen=True)
class RoutePoint:
    s: float
    alpha: float
    v_min_r: float
    v_max_r: float


@dataclass(frozen=True)
class RouteProfile:
    points: tuple[RoutePoint, ...]
    name: str = "route"
    source: str = ""
    _arrays: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pts = tuple(self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise RouteError("a route needs at least two points (start and end)")
        if pts[0].s != 0.0:
            raise RouteError(f"record 1: route must start at s = 0, got {pts[0].s}")
        for k, pt in enumerate(pts, start=1):
            if not all(np.isfinite([pt.s, pt.alpha, pt.v_min_r, pt.v_max_r])):
                raise RouteError(f"record {k}: non-finite value")
            if pt.v_min_r > pt.v_max_r:
                raise RouteError(f"record {k}: v_min {pt.v_min_r} > v_max {pt.v_max_r}")
            if pt.v_max_r <= 0:
                raise RouteError(f"record {k}: v_max must be > 0")
            if pt.v_min_r < 0:
                raise RouteError(f"record {k}: v_min must be >= 0")
            if k > 1 and not pt.s > pts[k - 2].s:
                raise RouteError(f"record {k}: s must strictly increase")
        arr = np.array([(p.s, p.alpha, p.v_min_r, p.v_max_r) for p in pts])
        object.__setattr__(self, "_arrays", {"s": arr[:, 0], "alpha": arr[:, 1],
                                             "v_min": arr[:, 2], "v_max": arr[:, 3]})

    def __len__(self):
        return len(self.points)

    @property
    def length(self) -> float:
        return self.points[-1].s

    @property
    def s(self) -> np.ndarray:
        return self._arrays["s"]

    def _segment(self, s):
        # index of the piece containing s; the end point belongs to the last piece
        k = np.searchsorted(self.s, s, side="right") - 1
        return np.clip(k, 0, len(self.points) - 2)

    def grade_at(self, s):
        return self._arrays["alpha"][self._segment(s)]

    def v_min_at(self, s):
        return self._arrays["v_min"][self._segment(s)]

    def v_max_at(self, s):
        return self._arrays["v_max"][self._segment(s)]

    def limits_over(self, a: float, b: float) -> tuple[float, float]:
        """(max v_min, min v_max) over the closed interval [a, b]."""
        ka, kb = self._segment(a), self._segment(b)
        return (float(self._arrays["v_min"][ka:kb + 1].max()),
                float(self._arrays["v_max"][ka:kb + 1].min()))


# -- file I/O -------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps_route(route: RouteProfile) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {ROUTE_SCHEMA}\n")
    buf.write(f"# name: {route.name}\n")
    if route.source:
        buf.write(f"# source: {route.source}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUTE_HEADER)
    for pt in route.points:
        w.writerow([_fmt(pt.s), _fmt(pt.alpha), _fmt(pt.v_min_r), _fmt(pt.v_max_r)])
    return buf.getvalue()


def save_route(route: RouteProfile, path) -> None:
    Path(path).write_text(dumps_route(route))


def loads_route(text: str, name: str = "route", source: str = "") -> RouteProfile:
    meta = {}
    rows = []
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            key, _, val = stripped[1:].partition(":")
            meta[key.strip()] = val.strip()
            continue
        cells = [c.strip() for c in next(csv.reader([stripped]))]
        if not header_seen:
            if tuple(cells) != ROUTE_HEADER:
                raise RouteParseError(lineno, f"expected header {','.join(ROUTE_HEADER)}")
            header_seen = True
            continue
        if len(cells) != 4:
            raise RouteParseError(lineno, f"expected 4 fields, got {len(cells)}")
        try:
            vals = [float(c) for c in cells]
        except ValueError as exc:
            raise RouteParseError(lineno, str(exc)) from None
        rows.append((lineno, vals))
    if not header_seen:
        raise RouteParseError(0, "missing header")
    if meta.get("schema", ROUTE_SCHEMA) != ROUTE_SCHEMA:
        raise RouteParseError(1, f"unsupported schema {meta['schema']!r}")
    points = []
    for lineno, (s, a, lo, hi) in rows:
        if lo > hi:
            raise RouteParseError(lineno, f"v_min {lo} > v_max {hi}")
        points.append(RoutePoint(s, a, lo, hi))
    try:
        return RouteProfile(tuple(points), name=meta.get("name", name), source=meta.get("source", source))
    except RouteError as exc:
        raise RouteParseError(rows[-1][0] if rows else 0, str(exc)) from None


def load_route(path) -> RouteProfile:
    path = Path(path)
    return loads_route(path.read_text(), name=path.stem, source=str(path))


# -- horizon ------------------------------------------------------------------------


@dataclass(frozen=True)
class Horizon:
    """Stage-wise data of one prediction window.

    ``alpha`` holds one grade per stage (N values, sampled at the stage
    midpoint); ``v_min`` and ``v_max`` hold one bound per node (N + 1 values).
    """

    s0: float
    ds: float
    alpha: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray

    @property
    def N(self) -> int:
        return len(self.alpha)

    def with_bounds(self, v_min, v_max) -> "Horizon":
        return Horizon(self.s0, self.ds, self.alpha, np.asarray(v_min, float), np.asarray(v_max, float))


def node_bounds(route: RouteProfile, s, ds: float) -> tuple[np.ndarray, np.ndarray]:
    """Velocity bounds of nodes at positions ``s`` on a grid of spacing ``ds``.

    The largest v_min and the smallest v_max on the open interval
    ``(s - ds, s + ds)`` (the two adjacent stages, without the limits that
    only start at their far ends), clipped to the route, so a node gets the
    same bounds in every window containing it.
    Standstill windows have v_min == v_max, which no discrete state hits
    exactly, so the lower bound is relaxed to half the upper bound there.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    v_min = np.empty(s.size)
    v_max = np.empty(s.size)
    shrink = 1e-9 * ds
    for i, x in enumerate(s):
        v_min[i], v_max[i] = route.limits_over(max(x - ds + shrink, 0.0), min(x + ds - shrink, route.length))
    pinch = v_min >= v_max
    v_min[pinch] = 0.5 * v_max[pinch]
    return v_min, v_max


def resample(route: RouteProfile, s0: float, N: int, ds: float) -> Horizon:
    """Sample the route onto ``N`` stages of length ``ds`` starting at ``s0``.

    Grades are taken at stage midpoints; node bounds come from
    :func:`node_bounds`.
    """
    if N < 1 or ds <= 0:
        raise ValueError("need N >= 1 and ds > 0")
    end = s0 + N * ds
    if end > route.length * (1 + 1e-12) + 1e-9:
        raise TruncationError(f"horizon end {end:.1f} m exceeds route length {route.length:.1f} m")
    nodes = s0 + ds * np.arange(N + 1)
    alpha = route.grade_at(s0 + ds * (np.arange(N) + 0.5)).astype(float)
    v_min, v_max = node_bounds(route, nodes, ds)
    return Horizon(float(s0), float(ds), alpha, v_min, v_max)


# -- bound tightening -------------------------------------------------------------

_GRID = 65


def _envelopes(v, alpha, p: VehicleParams, ds: float):
    """Forward-Euler images of ``v`` under ideal acceleration and braking.

    The ideal rates apply P_e,max (or P_b,max) at the wheel with no gearbox
    loss and no rotating inertia. Inertia only scales a net force down, so
    when the net force has the "wrong" sign (a climb too steep for full power,
    a descent too steep for full braking) the largest inertia of the
    driveline is used instead; the envelopes then still contain every mode.
    """
    v = np.asarray(v, dtype=float)
    F = resistance_force(v, alpha, p)
    rr = p.r_w * p.r_w
    heavy = p.m * rr / (p.m * rr + max(p.J_dt, max(p.J_pt)))
    push = p.P_e_max / v - F
    pull = -p.P_b_max / v - F
    acc = np.where(push >= 0, push, push * heavy) / (p.m * v)
    brk = np.where(pull <= 0, pull, pull * heavy) / (p.m * v)
    return v + acc * ds, v + brk * ds


def _grid(lo, hi):
    return np.unique(np.concatenate([np.linspace(lo, hi, _GRID), [lo, hi]]))


def _extreme(fn, lo, hi, sign):
    """max (sign=+1) or min (sign=-1) of fn over [lo, hi]: grid, then golden refinement."""
    g = _grid(lo, hi)
    vals = sign * fn(g)
    k = int(np.argmax(vals))
    best = float(vals[k])
    if 0 < k < len(g) - 1:
        a, b = g[k - 1], g[k + 1]
        r = (np.sqrt(5) - 1) / 2
        for _ in range(40):
            c, d = b - r * (b - a), a + r * (b - a)
            fc, fd = sign * fn(np.array([c, d]))
            if fc >= fd:
                b = d
            else:
                a = c
            best = max(best, float(fc), float(fd))
    return sign * best


def _bisect(fn, a, b, n=50):
    # fn(a) is True, fn(b) is False; returns the last True point
    for _ in range(n):
        mid = 0.5 * (a + b)
        if fn(mid):
            a = mid
        else:
            b = mid
    return a


def _sup_below(fn, lo, hi, target):
    """Largest v in [lo, hi] with fn(v) <= target, or None."""
    def ok(v):
        return fn(np.array([v]))[0] <= target

    if ok(hi):
        return hi
    g = _grid(lo, hi)
    good = fn(g) <= target
    if not good.any():
        return None
    k = int(np.flatnonzero(good)[-1])
    return _bisect(ok, g[k], g[k + 1])


def _inf_above(fn, lo, hi, target):
    """Smallest v in [lo, hi] with fn(v) >= target, or None."""
    def ok(v):
        return fn(np.array([v]))[0] >= target

    if ok(lo):
        return lo
    g = _grid(lo, hi)
    good = fn(g) >= target
    if not good.any():
        return None
    k = int(np.flatnonzero(good)[0])
    return _bisect(ok, g[k], g[k - 1])


def _sweep(alpha, lo, hi, p, ds):
    N = len(alpha)
    lo, hi = lo.copy(), hi.copy()

    def acc(i):
        return lambda v: _envelopes(v, alpha[i], p, ds)[0]

    def brk(i):
        return lambda v: _envelopes(v, alpha[i], p, ds)[1]

    # forward: nothing faster than full power, nothing slower than full braking
    for i in range(N):
        if lo[i] > hi[i]:
            raise InfeasibleRouteError(i, lo[i], hi[i])
        hi[i + 1] = min(hi[i + 1], _extreme(acc(i), lo[i], hi[i], +1))
        lo[i + 1] = max(lo[i + 1], _extreme(brk(i), lo[i], hi[i], -1))
    # backward: a node must still be able to brake below (and accelerate
    # above) the bounds of the next node
    for i in range(N - 1, -1, -1):
        if lo[i + 1] > hi[i + 1] or lo[i] > hi[i]:
            k = i + 1 if lo[i + 1] > hi[i + 1] else i
            raise InfeasibleRouteError(k, lo[k], hi[k])
        top = _sup_below(brk(i), lo[i], hi[i], hi[i + 1])
        bot = _inf_above(acc(i), lo[i], hi[i], lo[i + 1])
        if top is None or bot is None:
            raise InfeasibleRouteError(i, lo[i], hi[i])
        hi[i], lo[i] = top, bot
    for i in range(N + 1):
        if lo[i] > hi[i]:
            raise InfeasibleRouteError(i, lo[i], hi[i])
    return lo, hi


def tighten_bounds(h: Horizon, p: VehicleParams, max_iter: int = 20) -> Horizon:
    """Shrink the node bounds to what ideal acceleration and braking can reach.

    Forward and backward sweeps are repeated until nothing changes, so the
    result is a fixpoint and tightening it again returns it unchanged.
    """
    lo = np.asarray(h.v_min, dtype=float)
    hi = np.asarray(h.v_max, dtype=float)
    for _ in range(max_iter):
        new_lo, new_hi = _sweep(h.alpha, lo, hi, p, h.ds)
        if np.array_equal(new_lo, lo) and np.array_equal(new_hi, hi):
            break
        lo, hi = new_lo, new_hi
    return h.with_bounds(lo, hi)


# -- synthetic routes ------------------------------------------------------------------

ROUTE_KINDS = ("flat", "hill", "stops", "mixed")


def _build(pieces, length, name, source):
    """Route from (start s, alpha, v_min, v_max) pieces; merges equal neighbours."""
    pts = []
    for s, a, lo, hi in sorted(pieces):
        if s >= length:
            continue
        if pts and (pts[-1].alpha, pts[-1].v_min_r, pts[-1].v_max_r) == (a, lo, hi):
            continue
        if pts and pts[-1].s == s:
            pts[-1] = RoutePoint(s, a, lo, hi)
            continue
        pts.append(RoutePoint(float(s), float(a), float(lo), float(hi)))
    last = pts[-1]
    pts.append(RoutePoint(float(length), last.alpha, last.v_min_r, last.v_max_r))
    return RouteProfile(tuple(pts), name=name, source=source)


def _grade_profile(rng, length, n_hills):
    """Grade pieces: flat lead-in, then hills (climb then descent) at seeded positions."""
    pieces = [(0.0, 0.0)]
    span = length / (n_hills + 1)
    for k in range(n_hills):
        start = round(span * (k + 0.5) + rng.uniform(-0.1, 0.1) * span, -1)
        up_len = round(rng.uniform(0.20, 0.30) * span, -1)
        down_len = round(rng.uniform(0.20, 0.30) * span, -1)
        up = round(float(rng.uniform(0.02, 0.04)), 4)
        down = -round(float(rng.uniform(0.03, 0.05)), 4)
        pieces += [(start, up), (start + up_len, down), (start + up_len + down_len, 0.0)]
    return pieces


def generate_route(kind: str, length: float = 5000.0, seed: int = 0,
                   v_max: float = 80 * KMH, v_min: float = STANDSTILL_SPEED) -> RouteProfile:
    """Deterministic synthetic route.

    * ``flat``: zero grade, constant limits.
    * ``hill``: one seeded climb-and-descent per 2.5 km (at least one).
    * ``stops``: flat; a standstill window (v_min = v_max = 10 km/h, 50 m long)
      at 40 % of the length and a 60 km/h zone from 65 % to 80 %.
    * ``mixed``: the hills of ``hill`` plus a 60 km/h zone at 30-45 % and a
      standstill window at 70 %.
    """
    if kind not in ROUTE_KINDS:
        raise ValueError(f"unknown route kind {kind!r}; choose from {', '.join(ROUTE_KINDS)}")
    if not length > 0:
        raise ValueError("length must be > 0")
    rng = np.random.default_rng(seed)
    source = f"genroute kind={kind} length={length:g} seed={seed}"
    n_hills = max(1, int(length // 2500))
    grades = _grade_profile(rng, length, n_hills) if kind in ("hill", "mixed") else [(0.0, 0.0)]
    limits = [(0.0, v_min, v_max)]
    if kind == "stops":
        stop = round(0.4 * length, -1)
        limits += [(stop, STANDSTILL_SPEED, STANDSTILL_SPEED), (stop + 50, v_min, v_max),
                   (round(0.65 * length, -1), v_min, 60 * KMH), (round(0.8 * length, -1), v_min, v_max)]
    elif kind == "mixed":
        stop = round(0.7 * length, -1)
        limits += [(round(0.3 * length, -1), v_min, 60 * KMH), (round(0.45 * length, -1), v_min, v_max),
                   (stop, STANDSTILL_SPEED, STANDSTILL_SPEED), (stop + 50, v_min, v_max)]
    cuts = sorted({s for s, *_ in grades} | {s for s, *_ in limits})
    pieces = []
    for s in cuts:
        a = [g for t, g in grades if t <= s][-1]
        lo, hi = [(l, h) for t, l, h in limits if t <= s][-1]
        pieces.append((s, a, lo, hi))
    return _build(pieces, length, name=kind, source=source)


def bundled_route(name: str) -> RouteProfile:
    """One of the routes shipped with the package (``flat``, ``hill``, ``stops``, ``mixed``)."""
    from importlib import resources

    text = resources.files("ecobnb.data").joinpath("routes", f"{name}.csv").read_text()
    return loads_route(text, name=name, source=f"bundled:{name}")
