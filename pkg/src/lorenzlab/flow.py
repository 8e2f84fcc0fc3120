"""Geodesic flow and null field-line integration on the universal cover.

Everything integrates in cover coordinates with the flat reference metric
for norms.  Early exit on runaway velocity is a normal outcome here (it is
how incomplete periodic geodesics manifest) and is reported through the
path status, not an exception.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import engine
from .metric import SurfaceModel, oriented_null_fields

__all__ = [
    "IntegrationError", "TangentState", "GeodesicPath", "LeafPath",
    "integrate_geodesic", "integrate_leaf", "cycle_scaling", "energy_drift",
    "propagate",
]

DEFAULT_TOL = 1e-10
SPEED_CAP = 1e8


class IntegrationError(RuntimeError):
    """Step-size underflow or a violated tube/closure precondition."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class TangentState:
    x: float
    y: float
    vx: float
    vy: float
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy])

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass
class GeodesicPath:
    """Sampled trajectory with its energy first integral.

    ``states`` rows are (x, y, vx, vy); ``status`` is an engine exit code
    (DONE / EVENT / SPEED_CAP are normal, the rest raise upstream).
    """

    ts: np.ndarray
    states: np.ndarray
    energies: np.ndarray
    status: int
    stats: dict = field(default_factory=dict)

    @property
    def t_reached(self) -> float:
        return float(self.ts[-1])

    @property
    def end(self) -> TangentState:
        x, y, vx, vy = self.states[-1]
        return TangentState(x, y, vx, vy, self.t_reached)

    @property
    def points(self) -> np.ndarray:
        return self.states[:, :2]

    def to_csv(self, fp) -> None:
        _write_csv(fp, self.ts, self.states, self.energies)


@dataclass
class LeafPath:
    """Field line of one lightlike direction field at unit Riemannian speed."""

    s: np.ndarray
    points: np.ndarray
    dirs: np.ndarray
    sign: str
    status: int
    energies: np.ndarray = None

    @property
    def displacement_rate(self) -> np.ndarray:
        span = self.s[-1] - self.s[0]
        return (self.points[-1] - self.points[0]) / (span if span else 1.0)

    @property
    def closed_offset(self) -> np.ndarray:
        """End-to-start displacement reduced modulo the deck lattice."""
        d = self.points[-1] - self.points[0]
        return d - np.round(d)

    def homology(self) -> np.ndarray:
        return np.round(self.points[-1] - self.points[0]).astype(int)

    def to_csv(self, fp) -> None:
        states = np.hstack([self.points, self.dirs])
        _write_csv(fp, self.s, states, self.energies)


def _write_csv(fp, ts, states, energies) -> None:
    close = False
    if isinstance(fp, (str, bytes)):
        fp = open(fp, "w")
        close = True
    try:
        fp.write("t,x,y,vx,vy,e\n")
        for i in range(len(ts)):
            e = energies[i] if energies is not None else 0.0
            row = states[i]
            fp.write(f"{ts[i]!r},{row[0]!r},{row[1]!r},{row[2]!r},{row[3]!r},{e!r}\n")
    finally:
        if close:
            fp.close()


def _as_state(s0) -> np.ndarray:
    if isinstance(s0, TangentState):
        return s0.as_array()
    arr = np.asarray(s0, dtype=float)
    if arr.shape != (4,):
        raise ValueError("initial state must be (x, y, vx, vy)")
    return arr


def integrate_geodesic(
    model: SurfaceModel,
    s0,
    t_end: float,
    tol: float = DEFAULT_TOL,
    speed_cap: float = SPEED_CAP,
    t0: float = 0.0,
    store_dt: float = 0.0,
    max_steps: int = 2_000_000,
) -> GeodesicPath:
    """Integrate the geodesic equation from ``s0`` up to affine time ``t_end``.

    Stops early (status SPEED_CAP) when the Riemannian velocity exceeds
    ``speed_cap`` — the incompleteness guard.  Step-size underflow raises,
    reporting the last state.
    """
    y0 = _as_state(s0)
    raw = model.backend.integrate_geodesic(
        y0, t0, t_end, tol, speed_cap=speed_cap,
        max_steps=max_steps, store_dt=store_dt,
    )
    if raw.status == engine.UNDERFLOW:
        raise IntegrationError(
            f"step size underflow at t={raw.t_end:.6g} "
            f"(incompleteness or coefficient singularity)", state=raw.end.copy(),
        )
    if raw.status == engine.EXHAUSTED:
        raise IntegrationError(f"step budget exhausted at t={raw.t_end:.6g}")
    energies = model.backend.energy(raw.ys)
    return GeodesicPath(
        ts=raw.ts, states=raw.ys, energies=energies, status=raw.status,
        stats={"naccept": raw.naccept, "nreject": raw.nreject,
               "hmin": raw.hmin, "hmax": raw.hmax},
    )


def integrate_leaf(
    model: SurfaceModel,
    sign: str,
    p0,
    arclen: float,
    tol: float = 1e-9,
    dir_hint=None,
    store_ds: float = 0.0,
    event=None,
    max_steps: int = 4_000_000,
) -> LeafPath:
    """Field line of the oriented lightlike field X+ or X- through ``p0``.

    Runs at unit Riemannian speed; the initial direction is future-pointing
    unless an explicit ``dir_hint`` overrides it.
    """
    if sign not in ("+", "-"):
        raise ValueError("sign must be '+' or '-'")
    if dir_hint is None:
        xp, xm = oriented_null_fields(model, p0)
        dir_hint = xp if sign == "+" else xm
    raw = model.backend.integrate_fieldline(
        (float(p0[0]), float(p0[1])), (float(dir_hint[0]), float(dir_hint[1])),
        arclen, tol, store_ds=store_ds, max_steps=max_steps,
        event=event or engine._NO_EVENT,
    )
    if raw.status == engine.UNDERFLOW:
        raise IntegrationError(
            f"direction field discontinuity persists near "
            f"({raw.end[0]:.6f}, {raw.end[1]:.6f})"
        )
    if raw.status == engine.EXHAUSTED:
        raise IntegrationError("field line step budget exhausted")
    if raw.status == engine.EVENT and event is not None:
        ax, ay, level, signed = event
        s_star, end = _refine_fieldline_event(
            model.backend, raw, (ax, ay), level, signed,
            np.array([float(p0[0]), float(p0[1])]), tol,
        )
        raw.ts[-1] = s_star
        raw.ys[-1] = end
    E, F, G = model.backend.coeffs_array(raw.ys[:, 0], raw.ys[:, 1])
    e = (E * raw.ys[:, 2] ** 2 + 2 * F * raw.ys[:, 2] * raw.ys[:, 3]
         + G * raw.ys[:, 3] ** 2)
    return LeafPath(
        s=raw.ts, points=raw.ys[:, :2], dirs=raw.ys[:, 2:4],
        sign=sign, status=raw.status, energies=e,
    )


def _refine_fieldline_event(backend, raw, axis, level, signed, pos0, tol):
    s_lo, s_hi = float(raw.prev[0]), float(raw.ts[-1])
    q_prev = raw.prev[1:5].copy()
    end_proj = (raw.ys[-1, 0] - pos0[0]) * axis[0] + (raw.ys[-1, 1] - pos0[1]) * axis[1]
    target = level if signed else math.copysign(level, end_proj)

    def f(s):
        if s <= s_lo:
            q = q_prev
        else:
            r = backend.integrate_fieldline(
                q_prev[:2], q_prev[2:4], s - s_lo, tol, store=2, store_ds=1e18,
            )
            q = r.end
        return (q[0] - pos0[0]) * axis[0] + (q[1] - pos0[1]) * axis[1] - target

    f_lo, f_hi = f(s_lo), f(s_hi)
    if f_lo == 0.0:
        return s_lo, np.array([*q_prev[:4]])
    if f_lo * f_hi > 0:  # event fired inside, keep endpoint
        return s_hi, raw.ys[-1].copy()
    s_star = brentq(f, s_lo, s_hi, xtol=1e-13 * (1.0 + abs(s_hi)))
    r = backend.integrate_fieldline(
        q_prev[:2], q_prev[2:4], s_star - s_lo, tol, store=2, store_ds=1e18,
    )
    return s_star, r.end.copy()


def _refine_geodesic_event(backend, raw, axis, level, signed, pos0, tol):
    t_lo, t_hi = float(raw.prev[0]), float(raw.ts[-1])
    q_prev = raw.prev[1:5].copy()
    end_proj = (raw.ys[-1, 0] - pos0[0]) * axis[0] + (raw.ys[-1, 1] - pos0[1]) * axis[1]
    target = level if signed else math.copysign(level, end_proj)

    def f(t):
        if t <= t_lo:
            q = q_prev
        else:
            r = backend.integrate_geodesic(
                q_prev, t_lo, t, tol, speed_cap=1e300, store=2, store_dt=1e18,
            )
            q = r.end
        return (q[0] - pos0[0]) * axis[0] + (q[1] - pos0[1]) * axis[1] - target

    f_lo, f_hi = f(t_lo), f(t_hi)
    if f_lo == 0.0:
        return t_lo, q_prev[:4].copy()
    if f_lo * f_hi > 0:
        return t_hi, raw.ys[-1].copy()
    t_star = brentq(f, t_lo, t_hi, xtol=1e-13 * (1.0 + abs(t_hi)))
    r = backend.integrate_geodesic(
        q_prev, t_lo, t_star, tol, speed_cap=1e300, store=2, store_dt=1e18,
    )
    return t_star, r.end.copy()


def propagate(
    model: SurfaceModel, state, t: float, tol: float = 1e-11,
    speed_cap: float = 1e12,
) -> np.ndarray:
    """End state of the geodesic flow map after affine time ``t``."""
    raw = model.backend.integrate_geodesic(
        _as_state(state), 0.0, t, tol, speed_cap=speed_cap,
        store=2, store_dt=1e18,
    )
    if raw.status != engine.DONE:
        raise IntegrationError(
            f"flow map stopped early (status {raw.status}) at t={raw.t_end:.6g}",
            state=raw.end.copy(),
        )
    return raw.end.copy()


def _torus_dist_to_polyline(points: np.ndarray, poly: np.ndarray) -> float:
    """max over ``points`` of the torus distance to the polyline ``poly``.

    Segment-wise distance with wrapping applied per difference; assumes
    individual segments are short compared to the fundamental domain.
    """
    if len(poly) < 2:
        d = points - poly[0]
        d -= np.round(d)
        return float(np.max(np.hypot(d[:, 0], d[:, 1])))
    a = poly[:-1]
    v = poly[1:] - a
    vv = np.maximum(np.einsum("ij,ij->i", v, v), 1e-300)
    # wrap relative to segment midpoints so segments up to one period work
    mid = a + 0.5 * v
    u = points[:, None, :] - mid[None, :, :]
    u -= np.round(u)
    tpar = np.clip(np.einsum("pij,ij->pi", u, v) / vv + 0.5, 0.0, 1.0)
    d = (u + 0.5 * v[None, :, :]) - tpar[:, :, None] * v[None, :, :]
    return float(np.max(np.min(np.hypot(d[..., 0], d[..., 1]), axis=1)))


def cycle_scaling(
    model: SurfaceModel,
    leaf: LeafPath,
    tol: float = 1e-11,
    tube: float = 1e-4,
) -> float:
    """Velocity scale factor of the geodesic after one cycle of a closed leaf.

    The geodesic starts tangent to the leaf with unit Riemannian speed and
    runs until its displacement along the leaf's deck class completes one
    cycle; the returned factor is 1 exactly when the periodic lightlike
    geodesic is closed (complete), > 1 when it accelerates and < 1 when it
    decelerates.
    """
    if np.linalg.norm(leaf.closed_offset) > 1e-8:
        raise ValueError("leaf is not closed modulo the deck lattice")
    h = leaf.homology().astype(float)
    hn = float(np.linalg.norm(h))
    if hn == 0.0:
        raise ValueError("closed leaf has zero deck displacement")
    lam = _cycle_scaling_once(model, leaf, h, hn, tol, tube)
    if lam is None:
        rev = LeafPath(
            s=leaf.s, points=leaf.points[::-1].copy(), dirs=-leaf.dirs[::-1],
            sign=leaf.sign, status=leaf.status,
        )
        lam_rev = _cycle_scaling_once(model, rev, -h, hn, tol, tube)
        if lam_rev is None:
            raise IntegrationError("cycle scaling diverged in both orientations")
        lam = 1.0 / lam_rev
    return lam


def _cycle_scaling_once(model, leaf, h, hn, tol, tube):
    p0 = leaf.points[0]
    d0 = leaf.dirs[0]
    axis = h / hn
    raw = model.backend.integrate_geodesic(
        np.array([p0[0], p0[1], d0[0], d0[1]]), 0.0, 1e18, tol,
        speed_cap=1e15, store=4000, store_dt=float(hn) / 2000.0,
        event=(axis[0], axis[1], hn, True),
    )
    if raw.status == engine.SPEED_CAP:
        return None
    if raw.status != engine.EVENT:
        raise IntegrationError(
            f"cycle did not complete (status {raw.status}); leaf may not be invariant"
        )
    t_star, end = _refine_geodesic_event(
        model.backend, raw, axis, hn, True, p0, tol,
    )
    sample = raw.ys[:: max(1, raw.ys.shape[0] // 400)]
    dist = _torus_dist_to_polyline(sample[:, :2], leaf.points)
    if dist > tube:
        raise IntegrationError(
            f"geodesic left the leaf tube (distance {dist:.2e}); "
            "input was not an invariant circle"
        )
    return float(math.hypot(end[2], end[3]) / math.hypot(d0[0], d0[1]))


def energy_drift(path: GeodesicPath) -> float:
    """max_t |e(t) - e(0)| along the sampled path."""
    return float(np.max(np.abs(path.energies - path.energies[0])))
