"""Lorentzian metric fields on the torus and the Klein bottle double cover.

A :class:`SurfaceModel` is an immutable description of a metric family on
the plane, invariant under the deck group of its topology.  All pointwise
queries (coefficients, connection coefficients, causal classification,
null directions) live here.  Klein-bottle metrics are always evaluated on
the orientable double cover with fundamental domain [0,1]^2; the glide
(x, y) -> (x + 1/2, -y) is kept only for deduplication downstream.

Conventions: g = E dx^2 + F (dx otimes dy + dy otimes dx) + G dy^2, i.e.
the displayed dxdy-coefficient of a family is the full off-diagonal entry.
Timelike means g(v, v) < 0.  The reference Riemannian metric is the flat
dx^2 + dy^2 on the cover.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .expr import compile_expr

__all__ = [
    "ModelError", "DegenerateMetricError", "LiftError",
    "SurfaceModel", "MetricValue", "ChristoffelValue",
    "eval_metric", "christoffels", "causal_type", "null_directions",
    "oriented_null_fields", "future_axis", "verify_lorentzian",
]

_FAMILY_CODES = {
    "flat": engine.FLAT,
    "strip_k": engine.STRIP,
    "galloway_eps": engine.GALLOWAY,
    "klein_galloway": engine.KLEIN,
}


class ModelError(ValueError):
    """A metric model violating its construction contract."""


class DegenerateMetricError(ValueError):
    """Signature degenerates (EG - F^2 >= 0) at a queried point."""


class LiftError(RuntimeError):
    """Continuity lifting of a direction field failed to stabilise."""


@dataclass(frozen=True)
class MetricValue:
    """Pointwise coefficients; ``lorentzian`` flags the signature."""

    E: float
    F: float
    G: float

    @property
    def det(self) -> float:
        return self.E * self.G - self.F * self.F

    @property
    def lorentzian(self) -> bool:
        return self.det < 0.0

    def apply(self, v, w) -> float:
        """g(v, w) for tangent vectors given as (x, y) pairs."""
        return (
            self.E * v[0] * w[0]
            + self.F * (v[0] * w[1] + v[1] * w[0])
            + self.G * v[1] * w[1]
        )


@dataclass(frozen=True)
class ChristoffelValue:
    xxx: float
    xxy: float
    xyy: float
    yxx: float
    yxy: float
    yyy: float

    def as_tuple(self):
        return (self.xxx, self.xxy, self.xyy, self.yxx, self.yxy, self.yyy)


@dataclass(frozen=True)
class SurfaceModel:
    """Immutable surface + metric family + conventions.

    ``sign`` = -1 selects the negated metric (same null cones, swapped
    causal characters); ``time_sign`` flips the future orientation;
    ``swap_fields`` exchanges the +/- labels of the two null fields.
    Use the classmethod constructors — they validate the model.
    """

    topology: str
    family: str
    params: tuple = ()
    expressions: tuple = ()
    sign: float = 1.0
    time_sign: float = 1.0
    swap_fields: bool = False
    label: str = field(default="", compare=False)

    # -- constructors -------------------------------------------------

    @classmethod
    def flat(cls, E: float, F: float, G: float, **kw) -> "SurfaceModel":
        m = cls("torus", "flat", (float(E), float(F), float(G)),
                label=kw.pop("label", f"flat({E},{F},{G})"), **kw)
        m.validate()
        return m

    @classmethod
    def strip(cls, k: int, **kw) -> "SurfaceModel":
        if int(k) == 0 or k != int(k):
            raise ModelError("strip_k requires a nonzero integer k")
        m = cls("torus", "strip_k", (float(int(k)),),
                label=kw.pop("label", f"strip_k({int(k)})"), **kw)
        m.validate()
        return m

    @classmethod
    def galloway(cls, eps: float, **kw) -> "SurfaceModel":
        if not 0.0 < eps < 0.25:
            raise ModelError("galloway_eps requires eps in (0, 1/4)")
        m = cls("torus", "galloway_eps", (float(eps),),
                label=kw.pop("label", f"galloway_eps({eps})"), **kw)
        m.validate()
        return m

    @classmethod
    def klein(cls, **kw) -> "SurfaceModel":
        m = cls("klein", "klein_galloway", (),
                label=kw.pop("label", "klein_galloway"), **kw)
        m.validate()
        return m

    @classmethod
    def custom(cls, E: str, F: str, G: str, topology: str = "torus", **kw) -> "SurfaceModel":
        for text in (E, F, G):
            compile_expr(text)  # surface syntax errors early
        m = cls(topology, "custom", (), (E, F, G),
                label=kw.pop("label", "custom"), **kw)
        m.validate()
        return m

    # -- structure ----------------------------------------------------

    def family_code(self) -> int:
        return _FAMILY_CODES[self.family]

    def kernel_params(self) -> tuple:
        p = tuple(self.params) + (0.0, 0.0, 0.0)
        return p[:3]

    def cache_key(self) -> tuple:
        return (self.family, self.params, self.expressions, self.sign)

    @property
    def backend(self):
        return engine.backend_for(self)

    @property
    def has_glide(self) -> bool:
        return self.topology == "klein"

    def negated(self) -> "SurfaceModel":
        """The model of -g; null cones unchanged, causal characters swap."""
        return SurfaceModel(
            self.topology, self.family, self.params, self.expressions,
            -self.sign, self.time_sign, self.swap_fields,
            label=f"neg({self.label})",
        )

    def glide(self, points: np.ndarray) -> np.ndarray:
        """Image of cover points under the Klein glide (x+1/2, -y)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty_like(pts)
        out[:, 0] = pts[:, 0] + 0.5
        out[:, 1] = -pts[:, 1]
        return out

    # -- validation ---------------------------------------------------

    def validate(self, grid_n: int = 256) -> None:
        if self.topology not in ("torus", "klein"):
            raise ModelError(f"unknown topology {self.topology!r}")
        if self.family == "custom":
            self._check_periodicity()
        bad = verify_lorentzian(self, grid_n)
        if bad:
            head = ", ".join(f"({p[0]:.4f}, {p[1]:.4f})" for p in bad[:4])
            raise ModelError(
                f"not Lorentzian: EG - F^2 >= 0 at {len(bad)} of "
                f"{grid_n * grid_n} sample points (e.g. {head})"
            )

    def _check_periodicity(self, n: int = 64, tol: float = 1e-9) -> None:
        b = self.backend
        xs = np.linspace(0.0, 1.0, n, endpoint=False) + 0.017
        ys = np.linspace(0.0, 1.0, n, endpoint=False) + 0.31
        for dx, dy in ((1.0, 0.0), (0.0, 1.0)):
            a = np.array(b.coeffs_array(xs, ys))
            c = np.array(b.coeffs_array(xs + dx, ys + dy))
            if np.max(np.abs(a - c)) > tol:
                raise ModelError(
                    f"custom coefficients not 1-periodic under shift ({dx}, {dy})"
                )
        if self.topology == "klein":
            # glide pullback acts as E -> E, G -> G, F -> -F
            E0, F0, G0 = b.coeffs_array(xs, ys)
            E1, F1, G1 = b.coeffs_array(xs + 0.5, -ys)
            err = max(
                np.max(np.abs(E0 - E1)),
                np.max(np.abs(G0 - G1)),
                np.max(np.abs(F0 + F1)),
            )
            if err > tol:
                raise ModelError("custom coefficients not glide-invariant on the Klein bottle")


# ---------------------------------------------------------------------------
# pointwise operations
# ---------------------------------------------------------------------------

def eval_metric(model: SurfaceModel, p) -> MetricValue:
    """Coefficients at a cover point; degeneracy is a flag, never a raise."""
    E, F, G = model.backend.coeffs(float(p[0]), float(p[1]))
    return MetricValue(E, F, G)


def christoffels(model: SurfaceModel, p) -> ChristoffelValue:
    """Connection coefficients at ``p``; analytic for builtin families,
    central finite differences for custom ones."""
    x, y = float(p[0]), float(p[1])
    m = eval_metric(model, p)
    if not m.lorentzian:
        raise DegenerateMetricError(f"metric degenerate at ({x}, {y}): det={m.det}")
    return ChristoffelValue(*model.backend.christoffels(x, y))


def causal_type(model: SurfaceModel, p, v, tol: float = 1e-9) -> str:
    """'timelike' | 'lightlike' | 'spacelike' with a scale-free tolerance."""
    vx, vy = float(v[0]), float(v[1])
    n2 = vx * vx + vy * vy
    if n2 == 0.0:
        raise ValueError("causal_type needs a nonzero vector")
    q = eval_metric(model, p).apply((vx, vy), (vx, vy))
    if q < -tol * n2:
        return "timelike"
    if q <= tol * n2:
        return "lightlike"
    return "spacelike"


def verify_lorentzian(model: SurfaceModel, grid_n: int = 256) -> list:
    """Sample an n x n grid on [0,1)^2; return points with EG - F^2 >= -1e-12."""
    u = (np.arange(grid_n) + 0.5) / grid_n
    X, Y = np.meshgrid(u, u, indexing="ij")
    E, F, G = model.backend.coeffs_array(X.ravel(), Y.ravel())
    det = E * G - F * F
    bad = np.nonzero(det >= -1e-12)[0]
    return [(float(X.ravel()[i]), float(Y.ravel()[i])) for i in bad]


# ---------------------------------------------------------------------------
# null directions and orientation conventions
# ---------------------------------------------------------------------------
#
# The two null lines are computed pointwise from the coefficients; global
# labels and orientations come from continuity: directions are chained
# along a straight path from the model's base point (0, 0), refining the
# sampling wherever a direction turns by more than pi/4 between samples.

_BASE = (0.0, 0.0)
_MIN_LIFT_STEP = 1e-5


def _null_pair_at(model: SurfaceModel, x: float, y: float):
    E, F, G = model.backend.coeffs(x, y)
    if E * G - F * F >= 0.0:
        raise DegenerateMetricError(f"metric degenerate at ({x}, {y})")
    return engine.null_pair(E, F, G)


def _match(dirs, hint):
    """Representative among the two lines closest to ``hint``.

    Returns the matched direction, its |alignment| and the |alignment| of
    the competing line — the caller must reject ambiguous matches, since a
    rotation past half the line separation makes the wrong line win.
    """
    ax, ay, bx, by = dirs
    da = ax * hint[0] + ay * hint[1]
    db = bx * hint[0] + by * hint[1]
    if abs(da) >= abs(db):
        return (ax, ay) if da >= 0 else (-ax, -ay), abs(da), abs(db)
    return (bx, by) if db >= 0 else (-bx, -by), abs(db), abs(da)


_COS_OK = math.cos(math.pi / 8.0)
_MATCH_MARGIN = 0.1
_CHAIN_H0 = 0.02
_CHAIN_HMAX = 0.05


def _try_match(model, p, hints):
    dirs = _null_pair_at(model, p[0], p[1])
    out = []
    for h in hints:
        d, align, other = _match(dirs, h)
        if align < _COS_OK or other > align - _MATCH_MARGIN:
            return None
        out.append(d)
    return out


def _chain_segment(model: SurfaceModel, p0, p1, hints):
    """Continue direction hints from p0 to p1 by adaptive marching.

    Each step is validated at its midpoint and endpoint so that a rotation
    aliasing onto the other null line (an exact quarter turn looks like a
    perfect match) cannot slip through at any sane rotation rate.
    """
    ax_, ay_ = float(p0[0]), float(p0[1])
    bx_, by_ = float(p1[0]), float(p1[1])
    total = math.hypot(bx_ - ax_, by_ - ay_)
    current = [tuple(h) for h in hints]
    if total == 0.0:
        got = _try_match(model, (bx_, by_), current)
        return got if got is not None else current
    ux, uy = (bx_ - ax_) / total, (by_ - ay_) / total
    s = 0.0
    h = min(_CHAIN_H0, total)
    while s < total:
        h = min(h, total - s)
        mid = (ax_ + (s + h / 2.0) * ux, ay_ + (s + h / 2.0) * uy)
        got_mid = _try_match(model, mid, current)
        got_end = None
        if got_mid is not None:
            end = (ax_ + (s + h) * ux, ay_ + (s + h) * uy)
            got_end = _try_match(model, end, got_mid)
        if got_end is None:
            if h < _MIN_LIFT_STEP:
                raise LiftError(
                    f"null directions rotate too fast near "
                    f"({ax_ + s * ux:.6f}, {ay_ + s * uy:.6f})"
                )
            h *= 0.5
            continue
        current = got_end
        s += h
        h = min(h * 1.4, _CHAIN_HMAX)
    return current


def _base_frame(model: SurfaceModel):
    """Seed representatives (d+, d-, future axis) at the base point."""
    da, db = _seed_pair(model)
    # orient the second null direction into the cone of the first
    m = eval_metric(model, _BASE)
    g_ab = m.apply(da, db)
    db_c = db if g_ab < 0 else (-db[0], -db[1])
    bx, by = da[0] + db_c[0], da[1] + db_c[1]
    n = math.hypot(bx, by)
    bx, by = bx / n, by / n
    if bx < 0 or (bx == 0 and by < 0):
        bx, by = -bx, -by
    if model.time_sign < 0:
        bx, by = -bx, -by
    return da, db, (bx, by)


def _seed_pair(model: SurfaceModel):
    """Base-point line representatives: angles in [0, pi), smaller first."""
    ax, ay, bx, by = _null_pair_at(model, *_BASE)
    if ay < 0 or (ay == 0 and ax < 0):
        ax, ay = -ax, -ay
    if by < 0 or (by == 0 and bx < 0):
        bx, by = -bx, -by
    ta = math.atan2(ay, ax) % math.pi
    tb = math.atan2(by, bx) % math.pi
    pair = ((ax, ay), (bx, by)) if ta <= tb else ((bx, by), (ax, ay))
    if model.swap_fields:
        pair = (pair[1], pair[0])
    return pair


def null_directions(model: SurfaceModel, p):
    """Ordered unit null pair (d+, d-) at ``p``.

    Labels and signs continue the base-point convention along the straight
    path from the base, so they agree with the global fields whenever the
    distributions are orientable.
    """
    da, db, _ = _base_frame(model)
    da, db = _chain_segment(model, _BASE, (float(p[0]), float(p[1])), (da, db))
    return np.array(da), np.array(db)


def future_axis(model: SurfaceModel, p):
    """Unit future-pointing timelike cone axis at ``p`` (continuity-lifted).

    Only the null pair is chained (continuity preserves cone membership);
    the axis is rebuilt at the endpoint inside the chained d+ cone and
    flipped if d+ was past-pointing at the base.
    """
    da0, db0, t0 = _base_frame(model)
    plus_is_future = eval_metric(model, _BASE).apply(da0, t0) < 0
    da, db = _chain_segment(model, _BASE, (float(p[0]), float(p[1])), (da0, db0))
    m = eval_metric(model, p)
    dbc = db if m.apply(da, db) < 0 else (-db[0], -db[1])
    bx, by = da[0] + dbc[0], da[1] + dbc[1]
    n = math.hypot(bx, by)
    bx, by = bx / n, by / n
    if not plus_is_future:
        bx, by = -bx, -by
    return np.array((bx, by))


def oriented_null_fields(model: SurfaceModel, p):
    """(X+, X-) at ``p``: the labelled null pair, future-oriented."""
    da, db = null_directions(model, p)
    t = future_axis(model, p)
    m = eval_metric(model, p)
    xp = da if m.apply(da, t) < 0 else -da
    xm = db if m.apply(db, t) < 0 else -db
    return xp, xm
