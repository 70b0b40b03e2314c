"""Compiled evaluation of the driving modes.

Every path that needs dv/ds or a fuel rate (the search, the rollout, the
scalar vehicle API) ends up in :func:`eval_row` and :func:`fuel`, so they all
round the same way.

The vehicle is passed as one flat float array ``P`` (see :func:`pack`):
helpers that take several arrays pay for reference counting on every call,
which dominated the cost of the search.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# Reason codes (mirrors vehicle.Reason)
OK, OMEGA_MIN, OMEGA_MAX, TORQUE_MAX, BRAKE_MAX, NO_TRACTION, DOWNHILL_DISABLED = range(7)

# mode codes (mirrors vehicle.DrivingMode)
CRUISE, ECO_ROLL, COAST, ENGINE_BRAKE, ACCELERATE, DOWNHILL = range(6)

# layout of P: scalars, then a header of offsets, then the arrays
M, RHO, CD, AF, GRAV, CRR, RW, IR, ETA_R, JDT, W_MIN, W_MAX, IDLE = range(13)
N_GEARS, O_GEAR, O_JPT, O_TL, O_FC, O_FR, N_FR, O_TM, N_TM, O_EB, N_EB, O_EF, N_EF = range(13, 26)
_HEADER = 26


def pack(p) -> np.ndarray:
    """Flatten vehicle parameters into the array the compiled functions take."""
    w_line, t_line = p._ef_line
    tab = p._tables
    scal = [p.m, p.rho_a, p.c_d, p.A_f, p.g, p.c_rr, p.r_w, p.i_r, p.eta_r, p.J_dt,
            p.omega_min, p.omega_max, p.mdot_f_idle]
    parts = [np.asarray(p.gears, float), np.asarray(p.J_pt, float),
             np.asarray(p.tloss_coeffs, float).ravel(), np.asarray(p.fuel_coeffs, float)]
    tables = [tab["T_in_fr"], tab["T_e_max"], tab["T_eb_max"], (w_line, t_line)]
    header = [0.0] * (_HEADER - len(scal))
    header[N_GEARS - 13] = p.n_gears
    body = []
    pos = _HEADER
    for slot, arr in zip((O_GEAR, O_JPT, O_TL, O_FC), parts):
        header[slot - 13] = pos
        body.append(arr)
        pos += arr.size
    for slot, (x, y) in zip((O_FR, O_TM, O_EB, O_EF), tables):
        x, y = np.asarray(x, float), np.asarray(y, float)
        header[slot - 13] = pos
        header[slot + 1 - 13] = x.size
        body += [x, y]
        pos += 2 * x.size
    return np.concatenate([np.array(scal + header, float)] + body)


@njit(cache=True, inline="always")
def interp(x, P, off, n):
    """Piecewise-linear table lookup, clamped at both ends."""
    if x <= P[off]:
        return P[off + n]
    if x >= P[off + n - 1]:
        return P[off + 2 * n - 1]
    lo, hi = off, off + n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if P[mid] <= x:
            lo = mid
        else:
            hi = mid
    slope = (P[hi + n] - P[lo + n]) / (P[hi] - P[lo])
    return slope * (x - P[lo]) + P[lo + n]


@njit(cache=True, inline="always")
def _table(P, slot):
    return int(P[slot]), int(P[slot + 1])


@njit(cache=True, inline="always")
def grade_terms(alpha, P):
    """Rolling and grade resistance [N]; they depend on the grade only."""
    return P[M] * P[GRAV] * P[CRR] * math.cos(alpha), P[M] * P[GRAV] * math.sin(alpha)


@njit(cache=True, inline="always")
def resistance(v, roll, grade, P):
    return 0.5 * P[RHO] * P[CD] * P[AF] * v * v + roll + grade


@njit(cache=True, inline="always")
def engine_speed(it, v, P):
    return 30.0 * it * P[IR] * v / (math.pi * P[RW])


@njit(cache=True, inline="always")
def net_torque(T, w, c1, c2, c3):
    return T - min(max(c1 * w + c2 * T + c3, 0.0), T)


@njit(cache=True, inline="always")
def torque_for_net(target, w, c1, c2, c3):
    t1 = (target + c1 * w + c3) / (1.0 - c2)
    if c1 * w + c2 * t1 + c3 < 0.0:
        return target
    return t1


@njit(cache=True, inline="always")
def fuel_rate(T, w, P):
    o = int(P[O_FC])
    val = P[o] + P[o + 1] * w + P[o + 2] * T + P[o + 3] * w * w + P[o + 4] * w * T + P[o + 5] * T * T
    return max(val, 0.0)


@njit(cache=True, inline="always")
def max_torque(w, P):
    o, n = _table(P, O_TM)
    return interp(w, P, o, n)


@njit(cache=True, inline="always")
def ef_torque(w, P):
    full = max_torque(w, P)
    o, n = _table(P, O_EF)
    if w > P[o + n - 1]:
        return full
    return min(interp(w, P, o, n), full)


@njit(cache=True, inline="always")
def cruise_torque(F, y, w, P):
    it = P[int(P[O_GEAR]) + y]
    o = int(P[O_TL]) + 3 * y
    return torque_for_net(F * P[RW] / (P[ETA_R] * P[IR] * it), w, P[o], P[o + 1], P[o + 2])


@njit(cache=True, inline="always")
def eval_row(v, roll, grade, P, dvds, feas, reason, torque):
    """Fill one row (all mode-gear columns) for velocity ``v``."""
    G = int(P[N_GEARS])
    o_gear, o_jpt, o_tl = int(P[O_GEAR]), int(P[O_JPT]), int(P[O_TL])
    o_fr, n_fr = _table(P, O_FR)
    o_eb, n_eb = _table(P, O_EB)
    m, r_w, i_r, eta_r = P[M], P[RW], P[IR], P[ETA_R]
    w_min, w_max = P[W_MIN], P[W_MAX]
    F = resistance(v, roll, grade, P)
    rr = r_w * r_w
    coast_weak = True
    any_ok = False
    # eco-roll
    dvds[G] = -rr * F / ((m * rr + P[JDT]) * v)
    feas[G] = True
    reason[G] = OK
    torque[G] = 0.0
    for y in range(G):
        it = P[o_gear + y]
        k_co, k_eb, k_ac, k_dh = G + 1 + y, 2 * G + 1 + y, 3 * G + 1 + y, 4 * G + 1 + y
        w = engine_speed(it, v, P)
        if w < w_min or w > w_max:
            code = OMEGA_MIN if w < w_min else OMEGA_MAX
            for k in (y, k_co, k_eb, k_ac, k_dh):
                dvds[k] = 0.0
                feas[k] = False
                reason[k] = code
                torque[k] = 0.0
            continue
        any_ok = True
        c1, c2, c3 = P[o_tl + 3 * y], P[o_tl + 3 * y + 1], P[o_tl + 3 * y + 2]
        inert = m * rr + P[o_jpt + y]
        t_fr = interp(w, P, o_fr, n_fr)
        t_eb_max = interp(w, P, o_eb, n_eb)
        wheel = eta_r * i_r * it
        # cruise
        t_cr = cruise_torque(F, y, w, P)
        dvds[y] = 0.0
        torque[y] = t_cr
        if F <= 0:
            feas[y], reason[y] = False, NO_TRACTION
        elif t_cr <= max_torque(w, P):
            feas[y], reason[y] = True, OK
        else:
            feas[y], reason[y] = False, TORQUE_MAX
        # coast
        d_co = -rr / (inert * v) * (wheel * net_torque(t_fr, w, c1, c2, c3) / r_w + F)
        dvds[k_co] = d_co
        feas[k_co], reason[k_co], torque[k_co] = True, OK, 0.0
        if not d_co > 0:
            coast_weak = False
        # engine brake
        t_ebk = t_fr + t_eb_max
        dvds[k_eb] = -rr / (inert * v) * (wheel * net_torque(t_ebk, w, c1, c2, c3) / r_w + F)
        feas[k_eb], reason[k_eb], torque[k_eb] = True, OK, 0.0
        # accelerate
        t_ac = ef_torque(w, P)
        dvds[k_ac] = rr / (inert * v) * (wheel * net_torque(t_ac, w, c1, c2, c3) / r_w - F)
        feas[k_ac], reason[k_ac], torque[k_ac] = True, OK, t_ac
        # downhill (gated below)
        t_need = torque_for_net(max(-F, 0.0) * r_w / (eta_r * i_r * it), w, c1, c2, c3)
        t_dh = t_need - t_fr
        dvds[k_dh] = 0.0
        torque[k_dh] = t_dh
        if t_dh <= t_eb_max:
            feas[k_dh], reason[k_dh] = True, OK
        else:
            feas[k_dh], reason[k_dh] = False, BRAKE_MAX
    # downhill: only when no speed-feasible gear can hold speed by coasting
    if not (F < 0 and coast_weak and any_ok):
        for y in range(G):
            k = 4 * G + 1 + y
            if reason[k] == OK or reason[k] == BRAKE_MAX:
                feas[k], reason[k] = False, DOWNHILL_DISABLED


@njit(cache=True)
def table(v, alpha, P):
    n = v.size
    K = 5 * int(P[N_GEARS]) + 1
    dvds = np.empty((n, K))
    feas = np.empty((n, K), dtype=np.bool_)
    reason = np.empty((n, K), dtype=np.int8)
    torque = np.empty((n, K))
    roll, grade = grade_terms(alpha, P)
    for i in range(n):
        eval_row(v[i], roll, grade, P, dvds[i], feas[i], reason[i], torque[i])
    return dvds, feas, reason, torque


@njit(cache=True, inline="always")
def fuel(mode, gear, v, roll, grade, P):
    """Fuel mass flow [g/s] of a mode-gear pair at velocity ``v``."""
    if mode == ECO_ROLL:
        return P[IDLE]
    if mode != CRUISE and mode != ACCELERATE:
        return 0.0
    y = gear - 1
    w = engine_speed(P[int(P[O_GEAR]) + y], v, P)
    if mode == CRUISE:
        t = cruise_torque(resistance(v, roll, grade, P), y, w, P)
    else:
        t = ef_torque(w, P)
    return fuel_rate(t, w, P)


@njit(cache=True)
def fuel_many(modes, gears, v, alpha, P):
    out = np.empty(v.size)
    roll, grade = grade_terms(alpha, P)
    for i in range(v.size):
        out[i] = fuel(modes[i], gears[i], v[i], roll, grade, P)
    return out


@njit(cache=True)
def expand(v, g, alpha, ds, lo, hi, w_f, w_t, modes, gears, P, parent, combo, vn, gn):
    """Feasible children of a batch of nodes, written to the output buffers
    (each at least len(v) * n_combos long).

    A child is kept when its mode-gear pair is feasible, its velocity is
    positive and lies in [lo, hi]. Returns the number of children.
    """
    n = v.size
    K = modes.size
    dvds = np.empty(K)
    feas = np.empty(K, dtype=np.bool_)
    reason = np.empty(K, dtype=np.int8)
    torque = np.empty(K)
    c = 0
    roll, grade = grade_terms(alpha, P)
    for i in range(n):
        eval_row(v[i], roll, grade, P, dvds, feas, reason, torque)
        for k in range(K):
            if not feas[k]:
                continue
            x = v[i] + dvds[k] * ds
            if not (x > 0 and x >= lo and x <= hi):
                continue
            v_bar = 0.5 * (v[i] + x)
            if modes[k] == CRUISE:
                # v_bar == v here, so the torque of the row applies
                mdot = fuel_rate(torque[k], engine_speed(P[int(P[O_GEAR]) + k], v_bar, P), P)
            else:
                mdot = fuel(modes[k], gears[k], v_bar, roll, grade, P)
            parent[c] = i
            combo[c] = k
            vn[c] = x
            gn[c] = g[i] + (w_f * (mdot / v_bar) + w_t / v_bar) * ds
            c += 1
    return c


@njit(cache=True)
def bin_keep(v, g, lb, combo, v_lo, epsilon):
    """Survivors of epsilon-bin elimination (epsilon > 0): lowest g per bin.

    Ties go to the lowest (lb, v, combo). Returns indices in ascending order.
    """
    n = v.size
    bins = np.empty(n, dtype=np.int64)
    top = 0
    for i in range(n):
        b = int(max(math.ceil((v[i] - v_lo) / epsilon) - 1.0, 0.0))
        bins[i] = b
        top = max(top, b)
    best = np.full(top + 1, -1, dtype=np.int64)
    for i in range(n):
        b = bins[i]
        j = best[b]
        if j < 0:
            best[b] = i
            continue
        if g[i] != g[j]:
            better = g[i] < g[j]
        elif lb[i] != lb[j]:
            better = lb[i] < lb[j]
        elif v[i] != v[j]:
            better = v[i] < v[j]
        else:
            better = combo[i] < combo[j]
        if better:
            best[b] = i
    out = best[best >= 0]
    out.sort()
    return out


@njit(cache=True)
def sample(grid, row, v):
    """Heuristic row at velocities ``v``: exact on grid points, else the
    smaller of the two neighbours; +inf off the grid."""
    n = grid.size
    out = np.empty(v.size)
    for i in range(v.size):
        x = v[i]
        if not (x >= grid[0] and x <= grid[n - 1]):
            out[i] = np.inf
            continue
        k = np.searchsorted(grid, x)
        if grid[k] == x:
            out[i] = row[k]
        else:
            out[i] = min(row[k - 1], row[k])
    return out


@njit(cache=True, inline="always")
def h_at(x, grid, row):
    n = grid.size
    if not (x >= grid[0] and x <= grid[n - 1]):
        return np.inf
    k = np.searchsorted(grid, x)
    if grid[k] == x:
        return row[k]
    return min(row[k - 1], row[k])


@njit(cache=True, inline="always")
def lower_bound(g, x, last, beta, v_f, grid, row):
    if last:
        d = x - v_f
        return g + beta * (d * d)
    return g + h_at(x, grid, row)


@njit(cache=True)
def expand_bounded(v, g, alpha, ds, lo, hi, w_f, w_t, modes, gears, P, grid, row, last, beta, v_f, ub,
                   parent, combo, vn, gn, lb):
    """:func:`expand` plus the lower bound of every child; children whose
    bound is not below ``ub`` are dropped. Returns (kept, feasible)."""
    n = v.size
    K = modes.size
    dvds = np.empty(K)
    feas = np.empty(K, dtype=np.bool_)
    reason = np.empty(K, dtype=np.int8)
    torque = np.empty(K)
    c = 0
    n_feasible = 0
    roll, grade = grade_terms(alpha, P)
    for i in range(n):
        eval_row(v[i], roll, grade, P, dvds, feas, reason, torque)
        for k in range(K):
            if not feas[k]:
                continue
            x = v[i] + dvds[k] * ds
            if not (x > 0 and x >= lo and x <= hi):
                continue
            n_feasible += 1
            v_bar = 0.5 * (v[i] + x)
            if modes[k] == CRUISE:
                mdot = fuel_rate(torque[k], engine_speed(P[int(P[O_GEAR]) + k], v_bar, P), P)
            else:
                mdot = fuel(modes[k], gears[k], v_bar, roll, grade, P)
            g_next = g[i] + (w_f * (mdot / v_bar) + w_t / v_bar) * ds
            b = lower_bound(g_next, x, last, beta, v_f, grid, row)
            if not b < ub:
                continue
            parent[c] = i
            combo[c] = k
            vn[c] = x
            gn[c] = g_next
            lb[c] = b
            c += 1
    return c, n_feasible


@njit(cache=True)
def dive(j, v, g, ub, ds, alpha, lo, hi, w_f, w_t, modes, gears, P, grid, values, beta, v_f,
         path_combo, path_v):
    """Greedy dive from node (j, v, g): always take the child of lowest
    (lb, v, combo) until the last stage.

    Returns (status, lb of the leaf, steps taken); status is 0 for a complete
    dive, 1 when a node has no feasible child, 2 when the bound exceeds ub.
    """
    N = lo.size - 1
    K = modes.size
    dvds = np.empty(K)
    feas = np.empty(K, dtype=np.bool_)
    reason = np.empty(K, dtype=np.int8)
    torque = np.empty(K)
    steps = 0
    b_best = np.inf
    while j < N:
        roll, grade = grade_terms(alpha[j], P)
        eval_row(v, roll, grade, P, dvds, feas, reason, torque)
        last = j + 1 == N
        row = values[min(j + 1, values.shape[0] - 1)]
        k_best = -1
        x_best = 0.0
        g_best = 0.0
        b_best = np.inf
        for k in range(K):
            if not feas[k]:
                continue
            x = v + dvds[k] * ds
            if not (x > 0 and x >= lo[j + 1] and x <= hi[j + 1]):
                continue
            v_bar = 0.5 * (v + x)
            if modes[k] == CRUISE:
                mdot = fuel_rate(torque[k], engine_speed(P[int(P[O_GEAR]) + k], v_bar, P), P)
            else:
                mdot = fuel(modes[k], gears[k], v_bar, roll, grade, P)
            g_next = g + (w_f * (mdot / v_bar) + w_t / v_bar) * ds
            b = lower_bound(g_next, x, last, beta, v_f, grid, row)
            if k_best < 0 or b < b_best or (b == b_best and x < x_best):
                k_best, x_best, g_best, b_best = k, x, g_next, b
        if k_best < 0:
            return 1, np.inf, steps
        if b_best > ub:
            return 2, b_best, steps
        path_combo[steps] = k_best
        path_v[steps] = x_best
        steps += 1
        j += 1
        v, g = x_best, g_best
    return 0, b_best, steps
