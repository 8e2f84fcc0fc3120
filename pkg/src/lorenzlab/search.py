"""Finding closed geodesics: periodic shooting and causal length ascent.

Shooting solves the periodic boundary value problem with an automatically
chosen number of matching segments: closed definite geodesics here are
length maximisers and hence hyperbolically unstable, so a single period
can amplify perturbations by many orders of magnitude; segment matching
keeps every residual measurable at the 1e-9 certification level.

The maximiser performs monotone projected ascent of the Lorentzian length
of a causal polygon with fixed deck displacement, with feasibility
projection onto the causal cone edge by edge, and hands its limit to the
shooter for certification.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .flow import IntegrationError, TangentState, _torus_dist_to_polyline
from .foliation import FoliationAtlas, build_atlas
from .metric import SurfaceModel, eval_metric, future_axis, oriented_null_fields

__all__ = [
    "SearchError", "InfeasibleClassError", "StabilityCapError",
    "ClosedGeodesicRecord", "CausalPolygon", "MaximizerResult", "SurveyResult",
    "shoot", "maximize_length", "self_intersections", "survey",
]

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-9
DEDUP_TOL = 1e-4
LIGHTLIKE_LAMBDA_TOL = 1e-6
SEED_INTERCEPTS = 16
SEED_ANGLES = (-0.35, 0.0, 0.35)
STABILITY_CAP_FACTOR = 50.0


class SearchError(RuntimeError):
    pass


class InfeasibleClassError(SearchError):
    """No causal polygon with the requested displacement exists."""


class StabilityCapError(SearchError):
    """Ascent exceeded the Riemannian length cap: class not certified stable."""


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class ClosedGeodesicRecord:
    homology: tuple
    causal_type: str
    period: float
    initial: TangentState
    trace: np.ndarray            # dense (x, y) samples over one period
    residual: float
    method: str                  # 'shooting' | 'maximizer' | 'leaf'
    length: float
    energy: float
    anchor: float = 0.0          # transversal intercept, for ordering
    states: np.ndarray = None    # multiple-shooting chain, for re-verification
    segments: int = 1

    def to_dict(self) -> dict:
        return {
            "homology": [int(self.homology[0]), int(self.homology[1])],
            "causal_type": self.causal_type,
            "period": self.period,
            "initial": [self.initial.x, self.initial.y,
                        self.initial.vx, self.initial.vy],
            "residual": self.residual,
            "method": self.method,
            "length": self.length,
            "energy": self.energy,
            "anchor": self.anchor,
            "segments": self.segments,
        }


@dataclass
class SurveyResult:
    records: list                # deduplicated modulo the torus deck group
    distinct: list               # additionally glide-identified (Klein)
    warnings: list = field(default_factory=list)

    def to_json(self, **kw) -> str:
        return json.dumps(
            {
                "records": [r.to_dict() for r in self.records],
                "distinct": [r.to_dict() for r in self.distinct],
                "warnings": list(self.warnings),
            },
            sort_keys=True, **kw,
        )


def _canonical_class(h) -> tuple:
    p, q = int(h[0]), int(h[1])
    if q < 0 or (q == 0 and p < 0):
        p, q = -p, -q
    return (p, q)


def _causal_type_of_energy(e: float, speed2: float, tol: float = 1e-8) -> str:
    if e < -tol * speed2:
        return "timelike"
    if e > tol * speed2:
        return "spacelike"
    return "lightlike"


# ---------------------------------------------------------------------------
# shooting
# ---------------------------------------------------------------------------

def _flow_to(backend, state, t, tol):
    raw = backend.integrate_geodesic(
        np.asarray(state, dtype=float), 0.0, t, tol,
        speed_cap=1e10, store=2, store_dt=1e18,
    )
    if raw.status != engine.DONE:
        return None
    return raw.end


_STIFFNESS_CACHE: dict = {}


def _stiffness(model) -> float:
    """Coarse bound on the hyperbolic rate: max Christoffel magnitude."""
    key = model.cache_key()
    mu = _STIFFNESS_CACHE.get(key)
    if mu is None:
        worst = 0.0
        for x in np.linspace(0.0, 1.0, 33):
            for y in (0.0, 0.37):
                try:
                    worst = max(worst, max(abs(c) for c in
                                           model.backend.christoffels(x, y)))
                except Exception:
                    continue
        mu = worst
        _STIFFNESS_CACHE[key] = mu
    return mu


def _segment_count(model, T) -> int:
    """Segments keeping the per-segment error amplification around e^7."""
    mu = _stiffness(model)
    return int(min(16, max(1, math.ceil(mu * T / 7.0))))


def shoot(
    model: SurfaceModel,
    h,
    seed,
    tol: float = RESIDUAL_TOL,
    ode_tol: float = 1e-12,
    max_iter: int = 50,
) -> ClosedGeodesicRecord | None:
    """Newton iteration for a closed geodesic with deck displacement ``h``.

    Unknowns are the segment start states and the period, with the gauge
    fixed by unit initial Riemannian speed and a section through the seed
    point normal to the seed velocity.  Returns None when the iteration
    does not converge; structural failures raise.
    """
    h = (int(h[0]), int(h[1]))
    if h == (0, 0):
        raise SearchError("homology class must be nonzero")
    backend = model.backend
    s0 = np.asarray(
        seed.as_array() if isinstance(seed, TangentState) else seed, dtype=float
    )
    sp = math.hypot(s0[2], s0[3])
    if sp == 0.0:
        raise SearchError("seed velocity must be nonzero")
    s0 = s0.copy()
    s0[2:] /= sp
    T0 = math.hypot(h[0], h[1])
    p_seed = s0[:2].copy()
    v_seed = s0[2:].copy()

    m = _segment_count(model, T0)
    # chain guess along the straight representative: integrating a far-off
    # seed for a full period through a hyperbolic web is useless as a guess
    states = [
        s0 + np.array([h[0] * j / m, h[1] * j / m, 0.0, 0.0]) for j in range(m)
    ]
    z = np.concatenate([np.concatenate(states), [T0]])
    n_un = 4 * m + 1
    loose = max(ode_tol, 1e-9)

    def residual(zv, itol):
        st = [zv[4 * j: 4 * j + 4] for j in range(m)]
        T = zv[-1]
        if not (0.02 * T0 <= T <= 50.0 * T0):
            return None, None
        R = np.empty(4 * m + 2)
        ends = []
        for j in range(m):
            end = _flow_to(backend, st[j], T / m, itol)
            if end is None or np.max(np.abs(end[2:])) > 1e6:
                return None, None
            ends.append(end)
            target = st[(j + 1) % m].copy()
            if j == m - 1:
                target[0] += h[0]
                target[1] += h[1]
            R[4 * j: 4 * j + 4] = end - target
        R[4 * m] = st[0][2] ** 2 + st[0][3] ** 2 - 1.0
        R[4 * m + 1] = (st[0][0] - p_seed[0]) * v_seed[0] + \
                       (st[0][1] - p_seed[1]) * v_seed[1]
        return R, ends

    itol = loose
    R, ends = residual(z, itol)
    if R is None:
        return None
    best = float(np.linalg.norm(R))

    for _ in range(max_iter):
        match_inf = float(np.max(np.abs(R[: 4 * m])))
        gauges_ok = abs(R[4 * m]) < 1e-9 and abs(R[4 * m + 1]) < 1e-9
        if match_inf <= max(tol * 0.1, 10.0 * itol) and gauges_ok:
            if itol <= ode_tol:
                break
            itol = ode_tol      # polish stage at the tight tolerance
            R, ends = residual(z, itol)
            if R is None:
                return None
            best = float(np.linalg.norm(R))
            continue
        # sparse Jacobian: perturbing a segment state touches only its own
        # matching rows; neighbour coupling and gauges are analytic
        T = z[-1]
        J = np.zeros((4 * m + 2, n_un))
        for j in range(m):
            jn = (j + 1) % m
            J[4 * j: 4 * j + 4, 4 * jn: 4 * jn + 4] -= np.eye(4)
            base = z[4 * j: 4 * j + 4]
            for c in range(4):
                dz = 1e-7 * max(1.0, abs(base[c]))
                sp = base.copy()
                sp[c] += dz
                end = _flow_to(backend, sp, T / m, itol)
                if end is None:
                    return None
                J[4 * j: 4 * j + 4, 4 * j + c] += (end - ends[j]) / dz
            J[4 * j: 4 * j + 4, -1] = _geo_rhs_py(backend, ends[j]) / m
        J[4 * m, 2] = 2.0 * z[2]
        J[4 * m, 3] = 2.0 * z[3]
        J[4 * m + 1, 0] = v_seed[0]
        J[4 * m + 1, 1] = v_seed[1]
        dz, *_ = np.linalg.lstsq(J, -R, rcond=None)
        alpha = 1.0
        improved = False
        while alpha > 1e-4:
            zc = z + alpha * dz
            Rc, endsc = residual(zc, itol)
            if Rc is not None:
                nc = float(np.linalg.norm(Rc))
                if nc < best * (1.0 - 1e-4 * alpha) or nc < max(tol * 0.01, itol):
                    z, R, ends, best = zc, Rc, endsc, nc
                    improved = True
                    break
            alpha *= 0.5
        if not improved:
            return None
    else:
        return None

    # re-verify: re-integrate every segment and take the worst defect
    st = [z[4 * j: 4 * j + 4] for j in range(m)]
    T = float(z[-1])
    defect = 0.0
    traces = []
    for j in range(m):
        raw = backend.integrate_geodesic(
            st[j], 0.0, T / m, min(ode_tol, 1e-12),
            speed_cap=1e10, store=100_000, store_dt=T / (m * 400.0),
        )
        if raw.status != engine.DONE:
            return None
        target = st[(j + 1) % m].copy()
        if j == m - 1:
            target[0] += h[0]
            target[1] += h[1]
        defect = max(defect, float(np.linalg.norm(raw.end - target)))
        traces.append(raw.ys[:, :2])
    if defect > tol:
        return None

    trace = np.vstack(traces)
    e = float(backend.energy(st[0].reshape(1, 4))[0])
    speed2 = float(st[0][2] ** 2 + st[0][3] ** 2)
    ctype = _causal_type_of_energy(e, speed2)
    length = math.sqrt(abs(e)) * T if ctype != "lightlike" else 0.0
    return ClosedGeodesicRecord(
        homology=h,
        causal_type=ctype,
        period=T,
        initial=TangentState(*st[0]),
        trace=trace,
        residual=defect,
        method="shooting",
        length=length,
        energy=e,
        anchor=_trace_anchor(trace),
        states=np.array(st),
        segments=m,
    )


def _geo_rhs_py(backend, state):
    x, y, vx, vy = state
    g = backend.christoffels(float(x), float(y))
    return np.array([
        vx, vy,
        -(g[0] * vx * vx + 2 * g[1] * vx * vy + g[2] * vy * vy),
        -(g[3] * vx * vx + 2 * g[4] * vx * vy + g[5] * vy * vy),
    ])


def _trace_anchor(trace: np.ndarray) -> float:
    """x-intercept of the trace on {y = 0 mod 1} (fallback: first point)."""
    ys = trace[:, 1] % 1.0
    i = int(np.argmin(np.minimum(ys, 1.0 - ys)))
    return float(trace[i, 0] % 1.0)


# ---------------------------------------------------------------------------
# deduplication
# ---------------------------------------------------------------------------

def _resample(trace: np.ndarray, n: int = 256) -> np.ndarray:
    if len(trace) <= n:
        return trace
    idx = np.linspace(0, len(trace) - 1, n).astype(int)
    return trace[idx]


def _trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance of two traces on the torus."""
    da = _torus_dist_to_polyline(_resample(a), b)
    db = _torus_dist_to_polyline(_resample(b), a)
    return max(da, db)


def _same_geodesic(model, ra, rb, tol=DEDUP_TOL, glide=False) -> bool:
    if _trace_distance(ra.trace, rb.trace) < tol:
        return True
    if glide and model.has_glide:
        if _trace_distance(ra.trace, model.glide(rb.trace)) < tol:
            return True
    return False


def _dedup(model, records, tol=DEDUP_TOL, glide=False) -> list:
    """Keep one record per geometric geodesic (lowest residual wins)."""
    kept = []
    for r in sorted(records, key=lambda r: (r.residual, r.anchor)):
        if not any(_same_geodesic(model, r, k, tol, glide) for k in kept):
            kept.append(r)
    kept.sort(key=lambda r: (_canonical_class(r.homology), r.causal_type, r.anchor))
    return kept


# ---------------------------------------------------------------------------
# self-intersections
# ---------------------------------------------------------------------------

def self_intersections(trace: np.ndarray, max_segments: int = 1200) -> list:
    """Transversal crossings of a closed trace projected to the torus.

    Segment-pair sweep with nearest-image wrapping; adjacent segments
    (including the wrap-around pair) are skipped.
    """
    pts = np.asarray(trace, dtype=float)
    if len(pts) > max_segments + 1:
        pts = _resample(pts, max_segments + 1)
    a = pts[:-1]
    b = pts[1:]
    n = len(a)
    if n < 4:
        return []
    va = b - a
    mids = a + 0.5 * va
    out = []
    for i in range(n - 2):
        js = np.arange(i + 2, n)
        if i == 0:
            js = js[js != n - 1]  # wrap-around neighbour of segment 0
        if len(js) == 0:
            continue
        shift = np.round(mids[js] - mids[i])
        a2 = a[js] - shift
        v2 = va[js]
        d = a2 - a[i]
        denom = va[i, 0] * v2[:, 1] - va[i, 1] * v2[:, 0]
        ok = np.abs(denom) > 1e-14
        t = np.where(ok, (d[:, 0] * v2[:, 1] - d[:, 1] * v2[:, 0]) /
                     np.where(ok, denom, 1.0), -1.0)
        u = np.where(ok, (d[:, 0] * va[i, 1] - d[:, 1] * va[i, 0]) /
                     np.where(ok, denom, 1.0), -1.0)
        hit = ok & (t > 1e-9) & (t < 1 - 1e-9) & (u > 1e-9) & (u < 1 - 1e-9)
        for jj in np.nonzero(hit)[0]:
            p = a[i] + t[jj] * va[i]
            out.append((float(p[0] % 1.0), float(p[1] % 1.0)))
    # merge coincident crossing reports
    uniq = []
    for p in out:
        if not any(
            min(abs(p[0] - q[0]), 1 - abs(p[0] - q[0])) < 1e-6
            and min(abs(p[1] - q[1]), 1 - abs(p[1] - q[1])) < 1e-6
            for q in uniq
        ):
            uniq.append(p)
    return uniq


# ---------------------------------------------------------------------------
# causal length maximiser
# ---------------------------------------------------------------------------

@dataclass
class CausalPolygon:
    vertices: np.ndarray         # (N, 2) cover coordinates
    homology: tuple
    sign: str                    # 'nonspacelike' | 'nontimelike'
    slacks: np.ndarray           # -g(chord, chord) per edge, >= 0 when causal

    @property
    def n(self) -> int:
        return len(self.vertices)

    def chords(self) -> np.ndarray:
        v = self.vertices
        c = np.roll(v, -1, axis=0) - v
        c[-1] += self.homology
        return c

    def riemannian_length(self) -> float:
        c = self.chords()
        return float(np.sum(np.hypot(c[:, 0], c[:, 1])))

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "homology": [int(self.homology[0]), int(self.homology[1])],
            "sign": self.sign,
            "slacks": self.slacks.tolist(),
        }


@dataclass
class MaximizerResult:
    polygon: CausalPolygon
    length: float
    iterations: int
    grad_norm: float
    lengths: list                # monotone length history (subsampled)
    record: ClosedGeodesicRecord | None = None


def _polygon_quadratic(backend, verts, h):
    """q_i = g(chord, chord) at edge midpoints plus the coefficient arrays."""
    c = np.roll(verts, -1, axis=0) - verts
    c[-1] += h
    mids = verts + 0.5 * c
    E, F, G = backend.coeffs_array(mids[:, 0], mids[:, 1])
    q = E * c[:, 0] ** 2 + 2 * F * c[:, 0] * c[:, 1] + G * c[:, 1] ** 2
    return c, mids, (E, F, G), q


def _polygon_length(backend, verts, h):
    _, _, _, q = _polygon_quadratic(backend, verts, h)
    return float(np.sum(np.sqrt(np.maximum(-q, 0.0))))


def _polygon_grad(backend, verts, h):
    """Analytic gradient of the Lorentzian length in the vertex positions."""
    n = len(verts)
    c, mids, (E, F, G), q = _polygon_quadratic(backend, verts, h)
    ell = np.sqrt(np.maximum(-q, 1e-300))
    live = ell > 1e-9
    D = backend.derivs_array(mids[:, 0], mids[:, 1])
    gx = D[:, 0] * c[:, 0] ** 2 + 2 * D[:, 1] * c[:, 0] * c[:, 1] + D[:, 2] * c[:, 1] ** 2
    gy = D[:, 3] * c[:, 0] ** 2 + 2 * D[:, 4] * c[:, 0] * c[:, 1] + D[:, 5] * c[:, 1] ** 2
    # dq/d(chord) and dq/d(midpoint)
    dq_dc = np.stack([2 * (E * c[:, 0] + F * c[:, 1]),
                      2 * (F * c[:, 0] + G * c[:, 1])], axis=1)
    dq_dm = np.stack([gx, gy], axis=1)
    w = np.where(live, -0.5 / ell, 0.0)[:, None]
    dL_dc = w * dq_dc
    dL_dm = w * dq_dm
    grad = np.zeros_like(verts)
    # edge i depends on V_i (chord -, midpoint 1/2) and V_{i+1} (+, 1/2)
    grad += -dL_dc + 0.5 * dL_dm
    grad_next = dL_dc + 0.5 * dL_dm
    grad += np.roll(grad_next, 1, axis=0)
    return grad, q, ell


def _project_causal(backend, verts, h, slack_floor=-1e-12, sweeps=80):
    """Pull every edge chord back into the (nonspacelike) causal cone."""
    v = verts.copy()
    for _ in range(sweeps):
        c, mids, _, q = _polygon_quadratic(backend, v, h)
        bad = np.nonzero(q > 0.0)[0]
        if len(bad) == 0:
            return v, True
        for i in bad:
            E, F, G = backend.coeffs(float(mids[i, 0]), float(mids[i, 1]))
            ax, ay, bx, by = engine.null_pair(E, F, G)
            det = ax * by - ay * bx
            ca, cb = c[i]
            alpha = (ca * by - cb * bx) / det
            beta = (ax * cb - ay * ca) / det
            # orient basis rays toward the chord's side of the cone
            if alpha < 0 and beta < 0:
                alpha, beta = -alpha, -beta
                ax, ay, bx, by = -ax, -ay, -bx, -by
            alpha = max(alpha, 0.0)
            beta = max(beta, 0.0)
            cnew = np.array([alpha * ax + beta * bx, alpha * ay + beta * by])
            dc = 0.5 * (cnew - c[i])
            v[i] -= dc
            v[(i + 1) % len(v)] += dc
    c, _, _, q = _polygon_quadratic(backend, v, h)
    return v, bool(np.all(q <= -slack_floor))


def _initial_causal_polygon(model, h, n_vertices):
    """Concatenate two null field-line arcs into a causal loop of class h.

    Follows the future X+ line from a base point and the future X- line
    backward from the translated base point; their crossing closes a
    nonspacelike curve realising the class.
    """
    from .flow import integrate_leaf

    h = np.asarray(h, dtype=float)
    for flip in (1.0, -1.0):
        base = np.array([0.13, 0.21])
        target = base + flip * h
        try:
            fwd = integrate_leaf(model, "+", base, 12.0 * max(1.0, np.linalg.norm(h)),
                                 tol=1e-9, store_ds=0.01)
            bwd = integrate_leaf(
                model, "-", target,
                12.0 * max(1.0, np.linalg.norm(h)), tol=1e-9, store_ds=0.01,
                dir_hint=-oriented_null_fields(model, target)[1],
            )
        except IntegrationError:
            continue
        hit = _polyline_crossing(fwd.points, bwd.points)
        if hit is None:
            continue
        i, j, p = hit
        poly = np.vstack([fwd.points[: i + 1], [p], bwd.points[:j + 1][::-1]])
        if flip < 0:
            poly = poly[::-1] + h
        # resample to n_vertices
        seg = np.diff(poly, axis=0)
        s = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
        if s[-1] == 0.0:
            continue
        su = np.linspace(0.0, s[-1], n_vertices, endpoint=False)
        verts = np.stack([np.interp(su, s, poly[:, 0]),
                          np.interp(su, s, poly[:, 1])], axis=1)
        return verts
    raise InfeasibleClassError(
        f"no causal polygon with displacement {tuple(int(x) for x in h)} found"
    )


def _polyline_crossing(A: np.ndarray, B: np.ndarray):
    """First crossing (i, j, point) of two cover polylines, if any."""
    a0, a1 = A[:-1], A[1:]
    b0, b1 = B[:-1], B[1:]
    va = a1 - a0
    vb = b1 - b0
    for i in range(len(a0)):
        d = b0 - a0[i]
        denom = va[i, 0] * vb[:, 1] - va[i, 1] * vb[:, 0]
        ok = np.abs(denom) > 1e-14
        t = np.where(ok, (d[:, 0] * vb[:, 1] - d[:, 1] * vb[:, 0]) /
                     np.where(ok, denom, 1.0), -1.0)
        u = np.where(ok, (d[:, 0] * va[i, 1] - d[:, 1] * va[i, 0]) /
                     np.where(ok, denom, 1.0), -1.0)
        hit = ok & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
        idx = np.nonzero(hit)[0]
        if len(idx):
            j = int(idx[0])
            p = a0[i] + t[j] * va[i]
            return i, j, p
    return None


def maximize_length(
    model: SurfaceModel,
    h,
    sign: str = "nonspacelike",
    n_vertices: int = 64,
    grad_tol: float = 1e-8,
    max_iter: int = 20000,
    certify: bool = True,
) -> MaximizerResult:
    """Monotone projected ascent of Lorentzian arclength over causal
    polygons with deck displacement ``h``.

    ``sign`` = 'nontimelike' runs the identical ascent on the negated
    metric.  The Riemannian length cap (50 |h|) stands in for the wideness
    bound of stable classes; exceeding it raises StabilityCapError.
    """
    work = model if sign == "nonspacelike" else model.negated()
    if sign not in ("nonspacelike", "nontimelike"):
        raise ValueError("sign must be 'nonspacelike' or 'nontimelike'")
    hvec = np.array([int(h[0]), int(h[1])], dtype=float)
    backend = work.backend
    cap = STABILITY_CAP_FACTOR * float(np.linalg.norm(hvec))

    verts = _initial_causal_polygon(work, hvec, n_vertices)
    verts, ok = _project_causal(backend, verts, hvec)
    if not ok:
        raise InfeasibleClassError("initial polygon could not be made causal")

    L = _polygon_length(backend, verts, hvec)
    lengths = [L]
    step = 0.05
    pg_norm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        grad, q, ell = _polygon_grad(backend, verts, hvec)
        moved = False
        while step > 1e-13:
            cand, ok = _project_causal(backend, verts + step * grad, hvec)
            if ok:
                Lc = _polygon_length(backend, cand, hvec)
                if Lc >= L - 1e-15:
                    pg_norm = float(np.max(np.abs(cand - verts))) / step
                    verts, L = cand, Lc
                    moved = True
                    step = min(step * 1.3, 1.0)
                    break
            step *= 0.5
        if it % 50 == 0 or not moved:
            lengths.append(L)
        poly_len = float(np.sum(np.hypot(*(np.roll(verts, -1, 0) - verts).T)))
        if poly_len > cap:
            raise StabilityCapError(
                f"Riemannian length {poly_len:.2f} exceeds the stability "
                f"cap {cap:.2f}: class not certified stable"
            )
        if not moved or pg_norm < grad_tol:
            break
    lengths.append(L)

    _, _, _, q = _polygon_quadratic(backend, verts, hvec)
    poly = CausalPolygon(
        vertices=verts, homology=(int(h[0]), int(h[1])),
        sign=sign, slacks=-q,
    )
    rec = None
    if certify:
        rec = _certify_polygon(model, work, poly, sign)
    return MaximizerResult(
        polygon=poly, length=L, iterations=it,
        grad_norm=pg_norm if math.isfinite(pg_norm) else 0.0,
        lengths=lengths, record=rec,
    )


def _certify_polygon(model, work, poly, sign):
    """Smooth a corner state out of the polygon and hand it to the shooter."""
    c = poly.chords()
    ell = np.hypot(c[:, 0], c[:, 1])
    i = int(np.argmax(ell))
    v = c[i] / ell[i]
    seed = np.array([poly.vertices[i][0], poly.vertices[i][1], v[0], v[1]])
    rec = shoot(work, poly.homology, seed)
    if rec is None:
        return None
    if sign == "nontimelike":
        rec = _relabel_negated(model, rec)
    return rec


def _relabel_negated(model, rec) -> ClosedGeodesicRecord:
    """Record found on the negated metric, expressed for the original one."""
    e = -rec.energy
    sp2 = rec.initial.vx ** 2 + rec.initial.vy ** 2
    return ClosedGeodesicRecord(
        homology=rec.homology,
        causal_type=_causal_type_of_energy(e, sp2),
        period=rec.period,
        initial=rec.initial,
        trace=rec.trace,
        residual=rec.residual,
        method=rec.method,
        length=rec.length,
        energy=e,
        anchor=rec.anchor,
        states=rec.states,
        segments=rec.segments,
    )


# ---------------------------------------------------------------------------
# survey
# ---------------------------------------------------------------------------

def _default_classes(max_coord: int = 3) -> list:
    out = []
    for p in range(0, max_coord + 1):
        for q in range(-max_coord, max_coord + 1):
            if (p, q) == (0, 0) or math.gcd(p, abs(q)) != 1:
                continue
            if p == 0 and q < 0:
                continue
            if (p, q) != _canonical_class((p, q)):
                continue
            out.append((p, q))
    return sorted(set(out))


def _annulus_seed_points(atlas, annulus, n, rng):
    span = (annulus.hi - annulus.lo) % 1.0 or 1.0
    jitter = rng.uniform(-0.1, 0.1, n) / n
    cs = (annulus.lo + span * ((np.arange(n) + 0.5) / n + jitter)) % 1.0
    return cs


def _class_b_seeds(model, atlas, n_intercepts, angles, rng):
    """(point, velocity) seeds in the timelike cone, per annulus."""
    vertical = any(l.is_vertical_line() for l in atlas.leaves) or not atlas.leaves
    seeds = []
    for ann in atlas.annuli:
        cs = _annulus_seed_points(atlas, ann, n_intercepts, rng)
        for c in cs:
            p = (float(c), 0.0) if vertical else (0.0, float(c))
            try:
                axis = future_axis(model, p)
            except Exception:
                continue
            for a in angles:
                ca, sa = math.cos(a), math.sin(a)
                v = (axis[0] * ca - axis[1] * sa, axis[0] * sa + axis[1] * ca)
                seeds.append((p, v))
    return seeds


def _leaf_class(atlas) -> tuple | None:
    for l in atlas.leaves:
        return _canonical_class(l.homology)
    return None


def _shoot_aligned(model, h, p, v, warnings):
    hd = np.array(h, dtype=float)
    hd /= np.linalg.norm(hd)
    vv = np.array(v, dtype=float)
    if vv[0] * hd[0] + vv[1] * hd[1] < 0:
        vv = -vv
    try:
        return shoot(model, h, np.array([p[0], p[1], vv[0], vv[1]]))
    except (SearchError, IntegrationError) as exc:
        warnings.append(f"shoot failed at {p}: {exc}")
        return None


def survey(
    model: SurfaceModel,
    classes=None,
    atlas: FoliationAtlas | None = None,
    n_intercepts: int = SEED_INTERCEPTS,
    angles=SEED_ANGLES,
    rng_seed: int = 0,
    workers: int = 1,
) -> SurveyResult:
    """Census of closed geodesics.

    Class B: shooting from seed grids in every annulus for both causal
    signs plus certification of complete (cycle scaling 1) closed leaves.
    Class A: shooting over the supplied deck classes (default: primitive
    classes with coordinates up to 3).  Per-seed failures become warnings.
    """
    if atlas is None:
        atlas = build_atlas(model)
    rng = np.random.default_rng(rng_seed)
    warnings: list = []
    found: list = []

    tasks = []
    if atlas.verdict == "B":
        h0 = _leaf_class(atlas) or (0, 1)
        for p, v in _class_b_seeds(model, atlas, n_intercepts, angles, rng):
            tasks.append((model, h0, p, v, "as-is"))
        neg = model.negated()
        for p, v in _class_b_seeds(neg, atlas, n_intercepts, angles, rng):
            tasks.append((neg, h0, p, v, "negated"))
    else:
        classes = [_canonical_class(c) for c in (classes or _default_classes())]
        base_pts = [(0.1, 0.1), (0.35, 0.6), (0.6, 0.35), (0.85, 0.85)]
        for h in classes:
            hd = np.array(h, dtype=float)
            hd /= np.linalg.norm(hd)
            sector = _class_sector(model, h)
            lanes = []
            if sector in ("timelike", "mixed", "lightlike"):
                lanes.append((model, "as-is"))
            if sector in ("spacelike", "mixed"):
                lanes.append((model.negated(), "negated"))
            for work, tag in lanes:
                for p in base_pts:
                    for a in angles:
                        ca, sa = math.cos(a), math.sin(a)
                        v = (hd[0] * ca - hd[1] * sa, hd[0] * sa + hd[1] * ca)
                        tasks.append((work, h, p, v, tag))

    def run(task):
        work, h, p, v, tag = task
        rec = _shoot_aligned(work, h, p, v, warnings)
        if rec is not None and tag == "negated":
            rec = _relabel_negated(model, rec)
        return rec

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    found.extend(r for r in results if r is not None)

    # complete closed leaves are closed lightlike geodesics
    for leaf in atlas.leaves:
        if abs(leaf.lam - 1.0) > LIGHTLIKE_LAMBDA_TOL:
            continue
        i = 0
        p = leaf.points[i]
        d = leaf.points[min(i + 1, len(leaf.points) - 1)] - p
        n = np.hypot(d[0], d[1])
        if n == 0:
            continue
        try:
            rec = shoot(model, leaf.homology,
                        np.array([p[0], p[1], d[0] / n, d[1] / n]))
        except (SearchError, IntegrationError) as exc:
            warnings.append(f"leaf certification failed at {leaf.intercept}: {exc}")
            rec = None
        if rec is not None and rec.causal_type == "lightlike":
            rec = ClosedGeodesicRecord(**{**rec.__dict__, "method": "leaf"})
            found.append(rec)
        else:
            warnings.append(
                f"complete leaf at {leaf.intercept:.6f} failed certification"
            )

    records = _dedup(model, found)
    distinct = _dedup(model, records, glide=True) if model.has_glide else records
    return SurveyResult(records=records, distinct=distinct, warnings=warnings)


def _class_sector(model, h) -> str:
    """Causal character of the straight representative of class h."""
    u = np.linspace(0.0, 1.0, 64, endpoint=False)
    xs = 0.1 + u * h[0]
    ys = 0.1 + u * h[1]
    E, F, G = model.backend.coeffs_array(xs, ys)
    q = E * h[0] ** 2 + 2 * F * h[0] * h[1] + G * h[1] ** 2
    if float(np.max(q)) < 0:
        return "timelike"
    if float(np.min(q)) > 0:
        return "spacelike"
    if float(np.max(np.abs(q))) < 1e-12:
        return "lightlike"
    return "mixed"
