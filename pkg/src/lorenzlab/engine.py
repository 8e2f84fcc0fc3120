"""Evaluation and integration kernels shared by all higher-level modules.

Builtin metric families run through compiled (numba) kernels; custom
expression-defined metrics use a pure-python fallback with identical
stepping logic.  All integration happens in universal-cover coordinates;
nothing here wraps points into a fundamental domain.

Integrator: embedded Dormand-Prince 5(4) with PI step-size control.  The
``tol`` arguments bound the local error per unit of the independent
parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "FLAT", "STRIP", "GALLOWAY", "KLEIN", "CUSTOM",
    "DONE", "EVENT", "SPEED_CAP", "UNDERFLOW", "EXHAUSTED",
    "RawPath", "JitBackend", "PyBackend", "backend_for", "warmup",
]

FLAT, STRIP, GALLOWAY, KLEIN, CUSTOM = 0, 1, 2, 3, 4

# integration exit statuses
DONE, EVENT, SPEED_CAP, UNDERFLOW, EXHAUSTED = 0, 1, 2, 3, 4

_TWO_PI = 2.0 * math.pi
_H_FLOOR = 1e-14

# Dormand-Prince 5(4) tableau
_C2, _C3, _C4, _C5 = 0.2, 0.3, 0.8, 8.0 / 9.0
_A21 = 0.2
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = (
    9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0,
)
_B1, _B3, _B4, _B5, _B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0,
)


# ---------------------------------------------------------------------------
# pointwise metric formulas (single source, wrapped for jit below)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _coeffs(code, sgn, p0, p1, p2, x, y):
    """Metric coefficients (E, F, G) with g = E dx^2 + 2F dxdy + G dy^2."""
    if code == 0:    # flat
        E, F, G = p0, p1, p2
    elif code == 1:  # strip family, p0 = k
        th = 2.0 * _TWO_PI * p0 * x
        s = math.sin(th)
        E, F, G = s, math.cos(th), -s
    elif code == 2:  # galloway family, p0 = eps
        c = math.cos(_TWO_PI * x)
        s = math.sin(_TWO_PI * x)
        c2 = c * c
        E, F, G = p0 - c2, -2.0 * s, c2 - p0
    else:            # klein (double cover)
        c = math.cos(_TWO_PI * x)
        s = math.sin(_TWO_PI * x)
        c2 = c * c
        E, F, G = c2, 2.0 * s, -c2
    return sgn * E, sgn * F, sgn * G


@njit(cache=True, nogil=True)
def _derivs(code, sgn, p0, p1, p2, x, y):
    """Partial derivatives (Ex, Fx, Gx, Ey, Fy, Gy) of the coefficients."""
    if code == 0:
        return 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    if code == 1:
        w = 2.0 * _TWO_PI * p0
        th = w * x
        c, s = math.cos(th), math.sin(th)
        return sgn * w * c, -sgn * w * s, -sgn * w * c, 0.0, 0.0, 0.0
    if code == 2:
        c = math.cos(_TWO_PI * x)
        s = math.sin(_TWO_PI * x)
        dc2 = -2.0 * _TWO_PI * s * c
        return -sgn * dc2, -sgn * 2.0 * _TWO_PI * c, sgn * dc2, 0.0, 0.0, 0.0
    c = math.cos(_TWO_PI * x)
    s = math.sin(_TWO_PI * x)
    dc2 = -2.0 * _TWO_PI * s * c
    return sgn * dc2, sgn * 2.0 * _TWO_PI * c, -sgn * dc2, 0.0, 0.0, 0.0


def _christoffels_from_parts_impl(E, F, G, Ex, Fx, Gx, Ey, Fy, Gy):
    """Second-kind Christoffel symbols from coefficients and partials.

    Returns (Gxxx, Gxxy, Gxyy, Gyxx, Gyxy, Gyyy); invariant under g -> -g.
    """
    det = E * G - F * F
    lx_xx = 0.5 * Ex
    lx_xy = 0.5 * Ey
    lx_yy = Fy - 0.5 * Gx
    ly_xx = Fx - 0.5 * Ey
    ly_xy = 0.5 * Gx
    ly_yy = 0.5 * Gy
    inv = 1.0 / det
    gxxx = (G * lx_xx - F * ly_xx) * inv
    gxxy = (G * lx_xy - F * ly_xy) * inv
    gxyy = (G * lx_yy - F * ly_yy) * inv
    gyxx = (E * ly_xx - F * lx_xx) * inv
    gyxy = (E * ly_xy - F * lx_xy) * inv
    gyyy = (E * ly_yy - F * lx_yy) * inv
    return gxxx, gxxy, gxyy, gyxx, gyxy, gyyy


christoffels_from_parts = _christoffels_from_parts_impl
_christoffels_from_parts = njit(cache=True, nogil=True)(_christoffels_from_parts_impl)


def _null_pair_impl(E, F, G):
    """Unit direction vectors of the two null lines of [[E, F], [F, G]].

    Branch selection avoids cancellation; the pair is deterministic but
    carries no orientation or labelling convention.
    """
    s = math.sqrt(F * F - E * G)
    if F >= 0.0:
        ax, ay = G, -(F + s)
        bx, by = -(F + s), E
    else:
        ax, ay = s - F, E
        bx, by = G, s - F
    na = math.sqrt(ax * ax + ay * ay)
    nb = math.sqrt(bx * bx + by * by)
    return ax / na, ay / na, bx / nb, by / nb


null_pair = _null_pair_impl
_null_pair = njit(cache=True, nogil=True)(_null_pair_impl)


@njit(cache=True, nogil=True)
def _geo_rhs(code, p0, p1, p2, x, y, vx, vy):
    E, F, G = _coeffs(code, 1.0, p0, p1, p2, x, y)
    Ex, Fx, Gx, Ey, Fy, Gy = _derivs(code, 1.0, p0, p1, p2, x, y)
    gxxx, gxxy, gxyy, gyxx, gyxy, gyyy = _christoffels_from_parts(
        E, F, G, Ex, Fx, Gx, Ey, Fy, Gy
    )
    ax = -(gxxx * vx * vx + 2.0 * gxxy * vx * vy + gxyy * vy * vy)
    ay = -(gyxx * vx * vx + 2.0 * gyxy * vx * vy + gyyy * vy * vy)
    return vx, vy, ax, ay


@njit(cache=True, nogil=True)
def _geodesic_kernel(
    code, p0, p1, p2,
    y0, t0, t_end, tol, speed_cap,
    max_steps, store, store_dt,
    ev_ax, ev_ay, ev_level, ev_signed,
):
    """DP5(4) integration of the geodesic equation.

    Event: stop once proj = (pos - pos0).(ev_ax, ev_ay) passes ev_level
    (absolute value unless ev_signed).  Returns
    (status, nst, ts, ys, prev, stats) where prev carries the pre-event or
    pre-failure state (t, x, y, vx, vy) and stats = (naccept, nreject,
    hmin, hmax).
    """
    direction = 1.0 if t_end >= t0 else -1.0
    span = abs(t_end - t0)
    ts = np.empty(store)
    ys = np.empty((store, 4))
    x, yy, vx, vy = y0[0], y0[1], y0[2], y0[3]
    t = t0
    ts[0] = t
    ys[0, 0], ys[0, 1], ys[0, 2], ys[0, 3] = x, yy, vx, vy
    nst = 1
    last_store = t
    prev = np.empty(5)
    prev[0], prev[1], prev[2], prev[3], prev[4] = t, x, yy, vx, vy
    x0, yy0 = x, yy

    h = 0.1 * tol ** 0.2
    if h < 1e-8:
        h = 1e-8
    if h > span:
        h = span
    if h > 0.05:
        h = 0.05
    h *= direction

    k1x, k1y, k1vx, k1vy = _geo_rhs(code, p0, p1, p2, x, yy, vx, vy)
    err_prev = 1e-4
    naccept = 0
    nreject = 0
    hmin = abs(h)
    hmax = abs(h)
    status = DONE

    while True:
        if (t - t_end) * direction >= 0.0:
            status = DONE
            break
        if naccept + nreject >= max_steps:
            status = EXHAUSTED
            break
        if (t + h - t_end) * direction > 0.0:
            h = t_end - t

        x2 = x + h * _A21 * k1x
        y2 = yy + h * _A21 * k1y
        vx2 = vx + h * _A21 * k1vx
        vy2 = vy + h * _A21 * k1vy
        k2x, k2y, k2vx, k2vy = _geo_rhs(code, p0, p1, p2, x2, y2, vx2, vy2)

        x3 = x + h * (_A31 * k1x + _A32 * k2x)
        y3 = yy + h * (_A31 * k1y + _A32 * k2y)
        vx3 = vx + h * (_A31 * k1vx + _A32 * k2vx)
        vy3 = vy + h * (_A31 * k1vy + _A32 * k2vy)
        k3x, k3y, k3vx, k3vy = _geo_rhs(code, p0, p1, p2, x3, y3, vx3, vy3)

        x4 = x + h * (_A41 * k1x + _A42 * k2x + _A43 * k3x)
        y4 = yy + h * (_A41 * k1y + _A42 * k2y + _A43 * k3y)
        vx4 = vx + h * (_A41 * k1vx + _A42 * k2vx + _A43 * k3vx)
        vy4 = vy + h * (_A41 * k1vy + _A42 * k2vy + _A43 * k3vy)
        k4x, k4y, k4vx, k4vy = _geo_rhs(code, p0, p1, p2, x4, y4, vx4, vy4)

        x5 = x + h * (_A51 * k1x + _A52 * k2x + _A53 * k3x + _A54 * k4x)
        y5 = yy + h * (_A51 * k1y + _A52 * k2y + _A53 * k3y + _A54 * k4y)
        vx5 = vx + h * (_A51 * k1vx + _A52 * k2vx + _A53 * k3vx + _A54 * k4vx)
        vy5 = vy + h * (_A51 * k1vy + _A52 * k2vy + _A53 * k3vy + _A54 * k4vy)
        k5x, k5y, k5vx, k5vy = _geo_rhs(code, p0, p1, p2, x5, y5, vx5, vy5)

        x6 = x + h * (_A61 * k1x + _A62 * k2x + _A63 * k3x + _A64 * k4x + _A65 * k5x)
        y6 = yy + h * (_A61 * k1y + _A62 * k2y + _A63 * k3y + _A64 * k4y + _A65 * k5y)
        vx6 = vx + h * (_A61 * k1vx + _A62 * k2vx + _A63 * k3vx + _A64 * k4vx + _A65 * k5vx)
        vy6 = vy + h * (_A61 * k1vy + _A62 * k2vy + _A63 * k3vy + _A64 * k4vy + _A65 * k5vy)
        k6x, k6y, k6vx, k6vy = _geo_rhs(code, p0, p1, p2, x6, y6, vx6, vy6)

        xn = x + h * (_B1 * k1x + _B3 * k3x + _B4 * k4x + _B5 * k5x + _B6 * k6x)
        yn = yy + h * (_B1 * k1y + _B3 * k3y + _B4 * k4y + _B5 * k5y + _B6 * k6y)
        vxn = vx + h * (_B1 * k1vx + _B3 * k3vx + _B4 * k4vx + _B5 * k5vx + _B6 * k6vx)
        vyn = vy + h * (_B1 * k1vy + _B3 * k3vy + _B4 * k4vy + _B5 * k5vy + _B6 * k6vy)
        k7x, k7y, k7vx, k7vy = _geo_rhs(code, p0, p1, p2, xn, yn, vxn, vyn)

        ex = h * (_E1 * k1x + _E3 * k3x + _E4 * k4x + _E5 * k5x + _E6 * k6x + _E7 * k7x)
        ey = h * (_E1 * k1y + _E3 * k3y + _E4 * k4y + _E5 * k5y + _E6 * k6y + _E7 * k7y)
        evx = h * (_E1 * k1vx + _E3 * k3vx + _E4 * k4vx + _E5 * k5vx + _E6 * k6vx + _E7 * k7vx)
        evy = h * (_E1 * k1vy + _E3 * k3vy + _E4 * k4vy + _E5 * k5vy + _E6 * k6vy + _E7 * k7vy)

        # error weights follow the state's own rate of change so that the
        # roundoff floor of the estimate stays below the budget during
        # velocity blowups (incomplete geodesics)
        budget = tol * abs(h)
        err = abs(ex) / (budget * (1.0 + abs(x) + abs(vx)))
        e2 = abs(ey) / (budget * (1.0 + abs(yy) + abs(vy)))
        if e2 > err:
            err = e2
        e2 = abs(evx) / (budget * (1.0 + abs(vx) + abs(k1vx)))
        if e2 > err:
            err = e2
        e2 = abs(evy) / (budget * (1.0 + abs(vy) + abs(k1vy)))
        if e2 > err:
            err = e2
        if err != err:  # NaN in the error estimate
            err = 1e30

        if err <= 1.0:
            if t + h == t:  # stagnation: steps no longer advance time
                status = UNDERFLOW
                break
            prev[0], prev[1], prev[2], prev[3], prev[4] = t, x, yy, vx, vy
            t = t + h
            x, yy, vx, vy = xn, yn, vxn, vyn
            k1x, k1y, k1vx, k1vy = k7x, k7y, k7vx, k7vy
            naccept += 1
            ah = abs(h)
            if ah < hmin:
                hmin = ah
            if ah > hmax:
                hmax = ah
            if nst < store and (store_dt <= 0.0 or abs(t - last_store) >= store_dt):
                ts[nst] = t
                ys[nst, 0], ys[nst, 1], ys[nst, 2], ys[nst, 3] = x, yy, vx, vy
                nst += 1
                last_store = t
            if vx * vx + vy * vy > speed_cap * speed_cap:
                status = SPEED_CAP
                break
            if ev_level > 0.0:
                proj = (x - x0) * ev_ax + (yy - yy0) * ev_ay
                hit = proj >= ev_level if ev_signed else abs(proj) >= ev_level
                if hit:
                    status = EVENT
                    break
            if err < 1e-30:
                err = 1e-30
            fac = 0.9 * err ** -0.14 * err_prev ** 0.08
            if fac > 5.0:
                fac = 5.0
            if fac < 0.2:
                fac = 0.2
            err_prev = err if err > 1e-4 else 1e-4
            h = h * fac
        else:
            nreject += 1
            fac = 0.9 * err ** -0.2
            if fac < 0.1:
                fac = 0.1
            h = h * fac
            if abs(h) < _H_FLOOR:
                status = UNDERFLOW
                break

    if nst < store and ts[nst - 1] != t:
        ts[nst] = t
        ys[nst, 0], ys[nst, 1], ys[nst, 2], ys[nst, 3] = x, yy, vx, vy
        nst += 1
    stats = np.empty(4)
    stats[0], stats[1], stats[2], stats[3] = naccept, nreject, hmin, hmax
    return status, nst, ts, ys, prev, stats


_COS_MATCH = math.cos(math.pi / 8.0)
_MATCH_MARGIN = 0.1


@njit(cache=True, nogil=True)
def _field_dir(code, p0, p1, p2, x, y, hx, hy):
    """Unit null direction at (x, y) closest to the hint (hx, hy).

    Returns (dx, dy, align, other): |alignment| of the match and of the
    competing line.  Callers reject the step when the match is weak or
    ambiguous — with nearly perpendicular null lines a rotation past 45
    degrees makes the wrong line win outright.
    """
    E, F, G = _coeffs(code, 1.0, p0, p1, p2, x, y)
    ax, ay, bx, by = _null_pair(E, F, G)
    da = ax * hx + ay * hy
    db = bx * hx + by * hy
    if abs(da) >= abs(db):
        if da >= 0.0:
            return ax, ay, da, abs(db)
        return -ax, -ay, -da, abs(db)
    if db >= 0.0:
        return bx, by, db, abs(da)
    return -bx, -by, -db, abs(da)


@njit(cache=True, nogil=True)
def _fieldline_kernel(
    code, p0, p1, p2,
    x0, y0, hx0, hy0,
    s_end, tol,
    max_steps, store, store_ds,
    ev_ax, ev_ay, ev_level, ev_signed,
):
    """Unit-speed null field-line integration with per-step hint continuity.

    State is (x, y); the direction hint advances after every accepted step
    and a step is rejected outright if the direction turned by more than
    pi/2 across it.  Same return layout as the geodesic kernel with
    ys[:, 2:4] holding the direction.
    """
    ts = np.empty(store)
    ys = np.empty((store, 4))
    n = math.sqrt(hx0 * hx0 + hy0 * hy0)
    hx, hy = hx0 / n, hy0 / n
    x, yy = x0, y0
    s = 0.0
    ts[0] = 0.0
    ys[0, 0], ys[0, 1], ys[0, 2], ys[0, 3] = x, yy, hx, hy
    nst = 1
    last_store = 0.0
    prev = np.empty(5)
    prev[0], prev[1], prev[2], prev[3], prev[4] = s, x, yy, hx, hy

    h = 0.1 * tol ** 0.2
    if h < 1e-8:
        h = 1e-8
    if h > 0.02:
        h = 0.02
    if h > s_end:
        h = s_end

    k1x, k1y, _, _ = _field_dir(code, p0, p1, p2, x, yy, hx, hy)
    err_prev = 1e-4
    naccept = 0
    nreject = 0
    hmin = h
    hmax = h
    status = DONE

    while True:
        if s >= s_end:
            status = DONE
            break
        if naccept + nreject >= max_steps:
            status = EXHAUSTED
            break
        if s + h > s_end:
            h = s_end - s

        x2 = x + h * _A21 * k1x
        y2 = yy + h * _A21 * k1y
        k2x, k2y, al, ot = _field_dir(code, p0, p1, p2, x2, y2, hx, hy)
        align = al
        margin = al - ot
        x3 = x + h * (_A31 * k1x + _A32 * k2x)
        y3 = yy + h * (_A31 * k1y + _A32 * k2y)
        k3x, k3y, al, ot = _field_dir(code, p0, p1, p2, x3, y3, hx, hy)
        if al < align:
            align = al
        if al - ot < margin:
            margin = al - ot
        x4 = x + h * (_A41 * k1x + _A42 * k2x + _A43 * k3x)
        y4 = yy + h * (_A41 * k1y + _A42 * k2y + _A43 * k3y)
        k4x, k4y, al, ot = _field_dir(code, p0, p1, p2, x4, y4, hx, hy)
        if al < align:
            align = al
        if al - ot < margin:
            margin = al - ot
        x5 = x + h * (_A51 * k1x + _A52 * k2x + _A53 * k3x + _A54 * k4x)
        y5 = yy + h * (_A51 * k1y + _A52 * k2y + _A53 * k3y + _A54 * k4y)
        k5x, k5y, al, ot = _field_dir(code, p0, p1, p2, x5, y5, hx, hy)
        if al < align:
            align = al
        if al - ot < margin:
            margin = al - ot
        x6 = x + h * (_A61 * k1x + _A62 * k2x + _A63 * k3x + _A64 * k4x + _A65 * k5x)
        y6 = yy + h * (_A61 * k1y + _A62 * k2y + _A63 * k3y + _A64 * k4y + _A65 * k5y)
        k6x, k6y, al, ot = _field_dir(code, p0, p1, p2, x6, y6, hx, hy)
        if al < align:
            align = al
        if al - ot < margin:
            margin = al - ot

        xn = x + h * (_B1 * k1x + _B3 * k3x + _B4 * k4x + _B5 * k5x + _B6 * k6x)
        yn = yy + h * (_B1 * k1y + _B3 * k3y + _B4 * k4y + _B5 * k5y + _B6 * k6y)
        k7x, k7y, al, ot = _field_dir(code, p0, p1, p2, xn, yn, hx, hy)
        if al < align:
            align = al
        if al - ot < margin:
            margin = al - ot

        ex = h * (_E1 * k1x + _E3 * k3x + _E4 * k4x + _E5 * k5x + _E6 * k6x + _E7 * k7x)
        ey = h * (_E1 * k1y + _E3 * k3y + _E4 * k4y + _E5 * k5y + _E6 * k6y + _E7 * k7y)
        budget = tol * h
        err = abs(ex) / (budget * (2.0 + abs(x)))
        e2 = abs(ey) / (budget * (2.0 + abs(yy)))
        if e2 > err:
            err = e2
        if err != err:
            err = 1e30
        if align < _COS_MATCH or margin < _MATCH_MARGIN:
            err = 4.0  # direction turned too far or match ambiguous: reject

        if err <= 1.0:
            if s + h == s:
                status = UNDERFLOW
                break
            prev[0], prev[1], prev[2], prev[3], prev[4] = s, x, yy, hx, hy
            s += h
            x, yy = xn, yn
            hx, hy = k7x, k7y
            k1x, k1y = k7x, k7y
            naccept += 1
            if h < hmin:
                hmin = h
            if h > hmax:
                hmax = h
            if nst < store and (store_ds <= 0.0 or s - last_store >= store_ds):
                ts[nst] = s
                ys[nst, 0], ys[nst, 1], ys[nst, 2], ys[nst, 3] = x, yy, hx, hy
                nst += 1
                last_store = s
            if ev_level > 0.0:
                proj = (x - x0) * ev_ax + (yy - y0) * ev_ay
                hit = proj >= ev_level if ev_signed else abs(proj) >= ev_level
                if hit:
                    status = EVENT
                    break
            if err < 1e-30:
                err = 1e-30
            fac = 0.9 * err ** -0.14 * err_prev ** 0.08
            if fac > 5.0:
                fac = 5.0
            if fac < 0.2:
                fac = 0.2
            err_prev = err if err > 1e-4 else 1e-4
            h = h * fac
        else:
            nreject += 1
            fac = 0.9 * err ** -0.2
            if fac < 0.1:
                fac = 0.1
            h = h * fac
            if h < _H_FLOOR:
                status = UNDERFLOW
                break

    if nst < store and ts[nst - 1] != s:
        ts[nst] = s
        ys[nst, 0], ys[nst, 1], ys[nst, 2], ys[nst, 3] = x, yy, hx, hy
        nst += 1
    stats = np.empty(4)
    stats[0], stats[1], stats[2], stats[3] = naccept, nreject, hmin, hmax
    return status, nst, ts, ys, prev, stats


@njit(cache=True, nogil=True)
def _energy_kernel(code, sgn, p0, p1, p2, ys, out):
    for i in range(ys.shape[0]):
        E, F, G = _coeffs(code, sgn, p0, p1, p2, ys[i, 0], ys[i, 1])
        vx, vy = ys[i, 2], ys[i, 3]
        out[i] = E * vx * vx + 2.0 * F * vx * vy + G * vy * vy


@njit(cache=True, nogil=True)
def _coeffs_batch(code, sgn, p0, p1, p2, xs, ys_, outE, outF, outG):
    for i in range(xs.shape[0]):
        E, F, G = _coeffs(code, sgn, p0, p1, p2, xs[i], ys_[i])
        outE[i] = E
        outF[i] = F
        outG[i] = G


@njit(cache=True, nogil=True)
def _derivs_batch(code, sgn, p0, p1, p2, xs, ys_, out):
    for i in range(xs.shape[0]):
        Ex, Fx, Gx, Ey, Fy, Gy = _derivs(code, sgn, p0, p1, p2, xs[i], ys_[i])
        out[i, 0] = Ex
        out[i, 1] = Fx
        out[i, 2] = Gx
        out[i, 3] = Ey
        out[i, 4] = Fy
        out[i, 5] = Gy


# ---------------------------------------------------------------------------
# results and backends
# ---------------------------------------------------------------------------

@dataclass
class RawPath:
    """Integration result in cover coordinates.

    ``ys`` rows are (x, y, vx, vy) for geodesics and (x, y, dx, dy) for
    field lines; ``prev`` is the state at the start of the final step,
    which brackets an event or failure together with the last row.
    """

    ts: np.ndarray
    ys: np.ndarray
    status: int
    prev: np.ndarray
    naccept: int
    nreject: int
    hmin: float
    hmax: float

    @property
    def t_end(self) -> float:
        return float(self.ts[-1])

    @property
    def end(self) -> np.ndarray:
        return self.ys[-1]


def _finish(status, nst, ts, ys, prev, stats) -> RawPath:
    return RawPath(
        ts=ts[:nst].copy(),
        ys=ys[:nst].copy(),
        status=int(status),
        prev=prev.copy(),
        naccept=int(stats[0]),
        nreject=int(stats[1]),
        hmin=float(stats[2]),
        hmax=float(stats[3]),
    )


_NO_EVENT = (0.0, 0.0, 0.0, False)


class JitBackend:
    """Compiled evaluation/integration for a builtin family."""

    def __init__(self, code: int, params: tuple, sign: float):
        self.code = code
        self.p = (float(params[0]), float(params[1]), float(params[2]))
        self.sign = float(sign)

    def coeffs(self, x: float, y: float):
        return _coeffs(self.code, self.sign, *self.p, x, y)

    def coeff_derivs(self, x: float, y: float):
        return _derivs(self.code, self.sign, *self.p, x, y)

    def christoffels(self, x: float, y: float):
        E, F, G = _coeffs(self.code, 1.0, *self.p, x, y)
        parts = _derivs(self.code, 1.0, *self.p, x, y)
        return _christoffels_from_parts(E, F, G, *parts)

    def coeffs_array(self, xs, ys):
        xs = np.ascontiguousarray(xs, dtype=float)
        ys = np.ascontiguousarray(ys, dtype=float)
        E = np.empty_like(xs)
        F = np.empty_like(xs)
        G = np.empty_like(xs)
        _coeffs_batch(self.code, self.sign, *self.p, xs, ys, E, F, G)
        return E, F, G

    def derivs_array(self, xs, ys):
        xs = np.ascontiguousarray(xs, dtype=float)
        ys = np.ascontiguousarray(ys, dtype=float)
        out = np.empty((xs.shape[0], 6))
        _derivs_batch(self.code, self.sign, *self.p, xs, ys, out)
        return out

    def energy(self, states) -> np.ndarray:
        states = np.ascontiguousarray(states, dtype=float)
        out = np.empty(states.shape[0])
        _energy_kernel(self.code, self.sign, *self.p, states, out)
        return out

    def integrate_geodesic(
        self, state, t0, t_end, tol,
        speed_cap=1e8, max_steps=2_000_000, store=400_000, store_dt=0.0,
        event=_NO_EVENT,
    ) -> RawPath:
        y0 = np.asarray(state, dtype=float)
        ax, ay, level, signed = event
        res = _geodesic_kernel(
            self.code, *self.p, y0, float(t0), float(t_end), float(tol),
            float(speed_cap), int(max_steps), int(store), float(store_dt),
            float(ax), float(ay), float(level), bool(signed),
        )
        return _finish(*res)

    def integrate_fieldline(
        self, p0, hint, s_end, tol,
        max_steps=2_000_000, store=400_000, store_ds=0.0,
        event=_NO_EVENT,
    ) -> RawPath:
        ax, ay, level, signed = event
        res = _fieldline_kernel(
            self.code, *self.p,
            float(p0[0]), float(p0[1]), float(hint[0]), float(hint[1]),
            float(s_end), float(tol), int(max_steps), int(store), float(store_ds),
            float(ax), float(ay), float(level), bool(signed),
        )
        return _finish(*res)


class PyBackend:
    """Pure-python path for expression-defined metrics.

    Coefficient callables come from :mod:`lorenzlab.expr`; partial
    derivatives use central differences with step ``fd_step`` and the
    stepping loops mirror the compiled kernels.
    """

    def __init__(self, fe, ff, fg, sign: float, fd_step: float = 1e-5):
        self.fe, self.ff, self.fg = fe, ff, fg
        self.sign = float(sign)
        self.h = fd_step

    def coeffs(self, x: float, y: float):
        s = self.sign
        return s * self.fe(x, y), s * self.ff(x, y), s * self.fg(x, y)

    def coeff_derivs(self, x: float, y: float):
        h = self.h
        s = self.sign
        inv = s / (2.0 * h)
        Ex = (self.fe(x + h, y) - self.fe(x - h, y)) * inv
        Fx = (self.ff(x + h, y) - self.ff(x - h, y)) * inv
        Gx = (self.fg(x + h, y) - self.fg(x - h, y)) * inv
        Ey = (self.fe(x, y + h) - self.fe(x, y - h)) * inv
        Fy = (self.ff(x, y + h) - self.ff(x, y - h)) * inv
        Gy = (self.fg(x, y + h) - self.fg(x, y - h)) * inv
        return Ex, Fx, Gx, Ey, Fy, Gy

    def christoffels(self, x: float, y: float):
        save, self.sign = self.sign, 1.0
        try:
            E, F, G = self.coeffs(x, y)
            parts = self.coeff_derivs(x, y)
        finally:
            self.sign = save
        return christoffels_from_parts(E, F, G, *parts)

    def coeffs_array(self, xs, ys):
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        E = np.empty_like(xs)
        F = np.empty_like(xs)
        G = np.empty_like(xs)
        for i in range(xs.shape[0]):
            E[i], F[i], G[i] = self.coeffs(xs[i], ys[i])
        return E, F, G

    def derivs_array(self, xs, ys):
        out = np.empty((len(xs), 6))
        for i in range(len(xs)):
            out[i] = self.coeff_derivs(xs[i], ys[i])
        return out

    def energy(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        out = np.empty(states.shape[0])
        for i, (x, y, vx, vy) in enumerate(states):
            E, F, G = self.coeffs(x, y)
            out[i] = E * vx * vx + 2.0 * F * vx * vy + G * vy * vy
        return out

    def _geo_rhs(self, q):
        x, y, vx, vy = q
        gxxx, gxxy, gxyy, gyxx, gyxy, gyyy = self.christoffels(x, y)
        return np.array([
            vx, vy,
            -(gxxx * vx * vx + 2.0 * gxxy * vx * vy + gxyy * vy * vy),
            -(gyxx * vx * vx + 2.0 * gyxy * vx * vy + gyyy * vy * vy),
        ])

    def _field_dir(self, x, y, hx, hy):
        save, self.sign = self.sign, 1.0
        try:
            E, F, G = self.coeffs(x, y)
        finally:
            self.sign = save
        ax, ay, bx, by = null_pair(E, F, G)
        da = ax * hx + ay * hy
        db = bx * hx + by * hy
        if abs(da) >= abs(db):
            d = (ax, ay) if da >= 0 else (-ax, -ay)
            return d[0], d[1], abs(da), abs(db)
        d = (bx, by) if db >= 0 else (-bx, -by)
        return d[0], d[1], abs(db), abs(da)

    def integrate_geodesic(
        self, state, t0, t_end, tol,
        speed_cap=1e8, max_steps=2_000_000, store=400_000, store_dt=0.0,
        event=_NO_EVENT,
    ) -> RawPath:
        q = np.asarray(state, dtype=float).copy()
        rhs = self._geo_rhs
        return _py_loop(
            rhs, None, q, float(t0), float(t_end), tol,
            speed_cap, max_steps, store, store_dt, event,
        )

    def integrate_fieldline(
        self, p0, hint, s_end, tol,
        max_steps=2_000_000, store=400_000, store_ds=0.0,
        event=_NO_EVENT,
    ) -> RawPath:
        n = math.hypot(hint[0], hint[1])
        q = np.array([p0[0], p0[1], hint[0] / n, hint[1] / n], dtype=float)
        return _py_loop(
            None, self._field_dir, q, 0.0, float(s_end), tol,
            math.inf, max_steps, store, store_ds, event,
        )


def _py_loop(rhs, field_dir, q, t0, t_end, tol, speed_cap,
             max_steps, store, store_dt, event) -> RawPath:
    """Python mirror of the compiled DP5(4) loops (geodesic or field line)."""
    ax_e, ay_e, level, signed = event
    is_field = field_dir is not None
    direction = 1.0 if t_end >= t0 else -1.0
    A = (
        (_A21,), (_A31, _A32), (_A41, _A42, _A43),
        (_A51, _A52, _A53, _A54), (_A61, _A62, _A63, _A64, _A65),
    )
    B = np.array([_B1, 0.0, _B3, _B4, _B5, _B6])
    Ecoef = np.array([_E1, 0.0, _E3, _E4, _E5, _E6, _E7])

    def eval_rhs(qq, hx, hy):
        if is_field:
            dx, dy, align, other = field_dir(qq[0], qq[1], hx, hy)
            return np.array([dx, dy, 0.0, 0.0]), align, align - other
        return rhs(qq), 1.0, 1.0

    t = t0
    x0, y0 = q[0], q[1]
    ts = [t]
    rows = [q.copy() if not is_field else np.array([q[0], q[1], q[2], q[3]])]
    last_store = t
    prev = np.array([t, *q[:4]])
    h = max(1e-8, min(0.05, 0.1 * tol ** 0.2, abs(t_end - t0) or 1e-8)) * direction
    hx, hy = q[2], q[3]
    k = np.empty((7, 4))
    k[0], _, _ = eval_rhs(q, hx, hy)
    err_prev = 1e-4
    naccept = nreject = 0
    hmin = hmax = abs(h)
    status = DONE

    while True:
        if (t - t_end) * direction >= 0.0:
            break
        if naccept + nreject >= max_steps:
            status = EXHAUSTED
            break
        if (t + h - t_end) * direction > 0.0:
            h = t_end - t
        align_min = 1.0
        margin_min = 1.0
        for i, row in enumerate(A):
            qs = q + h * sum(c * k[j] for j, c in enumerate(row))
            k[i + 1], al, mg = eval_rhs(qs, hx, hy)
            align_min = min(align_min, al)
            margin_min = min(margin_min, mg)
        qn = q + h * (B @ k[:6])
        k[6], al, mg = eval_rhs(qn, hx, hy)
        align_min = min(align_min, al)
        margin_min = min(margin_min, mg)
        errv = h * (Ecoef @ k)
        budget = tol * abs(h)
        if is_field:
            scale = 2.0 + np.abs(q[:2])
            err = float(np.max(np.abs(errv[:2]) / (budget * scale)))
        else:
            scale = 1.0 + np.abs(q) + np.abs(
                np.array([q[2], q[3], k[0][2], k[0][3]])
            )
            err = float(np.max(np.abs(errv) / (budget * scale)))
        if math.isnan(err):
            err = 1e30
        if is_field and (align_min < _COS_MATCH or margin_min < _MATCH_MARGIN):
            err = 4.0
        if err <= 1.0:
            if t + h == t:
                status = UNDERFLOW
                break
            prev = np.array([t, *q[:4]])
            t += h
            q = qn
            if is_field:
                q[2], q[3] = k[6][0], k[6][1]
                hx, hy = q[2], q[3]
            k[0] = k[6]
            naccept += 1
            hmin = min(hmin, abs(h))
            hmax = max(hmax, abs(h))
            if store_dt <= 0.0 or abs(t - last_store) >= store_dt:
                if len(ts) < store:
                    ts.append(t)
                    rows.append(q.copy())
                    last_store = t
            if not is_field and q[2] ** 2 + q[3] ** 2 > speed_cap ** 2:
                status = SPEED_CAP
                break
            if level > 0.0:
                proj = (q[0] - x0) * ax_e + (q[1] - y0) * ay_e
                if (proj >= level) if signed else (abs(proj) >= level):
                    status = EVENT
                    break
            err = max(err, 1e-30)
            fac = min(5.0, max(0.2, 0.9 * err ** -0.14 * err_prev ** 0.08))
            err_prev = max(err, 1e-4)
            h *= fac
        else:
            nreject += 1
            h *= max(0.1, 0.9 * err ** -0.2)
            if abs(h) < _H_FLOOR:
                status = UNDERFLOW
                break

    if ts[-1] != t:
        ts.append(t)
        rows.append(q.copy())
    return RawPath(
        ts=np.array(ts), ys=np.array(rows), status=status, prev=prev,
        naccept=naccept, nreject=nreject, hmin=hmin, hmax=hmax,
    )


_BACKEND_CACHE: dict = {}


def backend_for(model) -> "JitBackend | PyBackend":
    """Backend for a SurfaceModel, cached by the model's value key."""
    key = model.cache_key()
    backend = _BACKEND_CACHE.get(key)
    if backend is None:
        if model.family == "custom":
            from .expr import compile_expr

            backend = PyBackend(
                compile_expr(model.expressions[0]),
                compile_expr(model.expressions[1]),
                compile_expr(model.expressions[2]),
                model.sign,
            )
        else:
            backend = JitBackend(model.family_code(), model.kernel_params(), model.sign)
        _BACKEND_CACHE[key] = backend
    return backend


def warmup() -> None:
    """Force-compile the kernels (first call in a fresh cache is slow)."""
    b = JitBackend(STRIP, (1.0, 0.0, 0.0), 1.0)
    b.christoffels(0.1, 0.0)
    b.energy(np.array([[0.1, 0.0, 0.0, 1.0]]))
    b.coeffs_array(np.array([0.1]), np.array([0.0]))
    b.derivs_array(np.array([0.1]), np.array([0.0]))
    b.integrate_geodesic((0.125, 0.0, 0.0, 1.0), 0.0, 0.01, 1e-8, store=4)
    b.integrate_fieldline((0.3, 0.0), (0.0, 1.0), 0.01, 1e-8, store=4)
