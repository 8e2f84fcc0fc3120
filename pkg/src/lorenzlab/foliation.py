"""Global analysis of the two lightlike foliations.

Builds the closed-leaf census via return maps on a transversal circle,
decomposes the surface into annuli between consecutive closed leaves,
estimates the asymptotic displacement direction (rotation class) of each
foliation, decides class A versus class B, and resolves which boundary
leaf a field line through an interior point is affiliated to.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import brentq

from . import engine
from .flow import IntegrationError, LeafPath, cycle_scaling, integrate_leaf
from .metric import SurfaceModel, eval_metric, oriented_null_fields

__all__ = [
    "FoliationError", "UndeterminedClassError",
    "Leaf", "Annulus", "RotationClass", "FoliationAtlas",
    "rotation_class", "closed_leaves", "annuli", "build_atlas",
    "class_AB", "affiliation",
]

log = logging.getLogger(__name__)

ARCLEN_CAP = 1e3
ROTATION_ARCLEN = 1e3
N_ROTATION_SEEDS = 8


class FoliationError(RuntimeError):
    pass


class UndeterminedClassError(FoliationError):
    """Rotation classes too uncertain to separate class A from class B."""


@dataclass
class Leaf:
    """A closed leaf of one lightlike foliation."""

    sign: str
    intercept: float            # position on the transversal circle
    homology: tuple             # deck displacement of one cycle (primitive)
    lam: float                  # affine cycle scaling; 1 <=> closed geodesic
    points: np.ndarray          # dense trace over one cycle, cover coords
    closed: bool = True

    def is_vertical_line(self, tol: float = 1e-9) -> bool:
        return float(np.ptp(self.points[:, 0])) < tol

    def to_dict(self) -> dict:
        return {
            "sign": self.sign,
            "intercept": self.intercept,
            "homology": [int(self.homology[0]), int(self.homology[1])],
            "cycle_scaling": self.lam,
            "closed_geodesic": bool(abs(self.lam - 1.0) <= 1e-6),
        }


@dataclass
class Annulus:
    lo: float
    hi: float
    lo_leaf: int                 # index into the atlas leaf list, -1 if none
    hi_leaf: int
    has_timelike_loop: bool
    has_spacelike_loop: bool
    reeb: dict = field(default_factory=dict)   # per-sign crossing turnarounds

    @property
    def reeb_total(self) -> int:
        return sum(self.reeb.values())

    def contains(self, c: float) -> bool:
        offset = (c - self.lo) % 1.0
        return 0.0 < offset < (self.hi - self.lo) % 1.0 or self.lo_leaf < 0

    def to_dict(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "timelike_loop": self.has_timelike_loop,
            "spacelike_loop": self.has_spacelike_loop,
            "reeb": {k: int(v) for k, v in self.reeb.items()},
        }


@dataclass
class RotationClass:
    """Projective asymptotic direction with a confidence radius (radians)."""

    direction: tuple             # unit vector, defined up to overall sign
    radius: float
    rational: tuple | None       # coprime (p, q) when close to one

    @property
    def angle(self) -> float:
        return math.atan2(self.direction[1], self.direction[0]) % math.pi

    def distance_to(self, other: "RotationClass") -> float:
        d = abs(self.angle - other.angle) % math.pi
        return min(d, math.pi - d)

    def to_dict(self) -> dict:
        return {
            "direction": [self.direction[0], self.direction[1]],
            "radius": self.radius,
            "rational": list(self.rational) if self.rational else None,
        }


@dataclass
class FoliationAtlas:
    leaves: list
    annuli: list
    rotation: dict               # sign -> RotationClass
    verdict: str                 # 'A' | 'B'
    margin: float
    all_closed: dict = field(default_factory=dict)  # sign -> bool

    def leaves_of(self, sign: str) -> list:
        return [l for l in self.leaves if l.sign == sign]

    def annulus_of(self, c: float):
        for a in self.annuli:
            if a.contains(c % 1.0):
                return a
        return self.annuli[0] if self.annuli else None

    def to_dict(self) -> dict:
        return {
            "leaves": [l.to_dict() for l in self.leaves],
            "annuli": [a.to_dict() for a in self.annuli],
            "rotation": {s: r.to_dict() for s, r in self.rotation.items()},
            "class": self.verdict,
            "margin": self.margin,
            "all_closed": dict(self.all_closed),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


# ---------------------------------------------------------------------------
# rotation class
# ---------------------------------------------------------------------------

_SEEDS = [(0.06, 0.17), (0.19, 0.53), (0.31, 0.89), (0.44, 0.29),
          (0.56, 0.71), (0.69, 0.07), (0.81, 0.47), (0.94, 0.83)]


def _circular_mean_mod_pi(angles):
    c = sum(math.cos(2 * a) for a in angles)
    s = sum(math.sin(2 * a) for a in angles)
    return 0.5 * math.atan2(s, c) % math.pi


def _mod_pi_dist(a, b):
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _rationalize(angle: float, tol: float = 1e-4, max_den: int = 64):
    """Coprime (p, q) with direction angle within ``tol`` of ``angle``."""
    if _mod_pi_dist(angle, math.pi / 2) < tol:
        return (0, 1)
    slope = math.tan(angle)
    frac = Fraction(slope).limit_denominator(max_den)
    p, q = frac.denominator, frac.numerator
    if p == 0 and q == 0:
        return None
    if _mod_pi_dist(math.atan2(q, p), angle) < tol:
        g = math.gcd(abs(p), abs(q))
        p, q = p // g, q // g
        if p < 0 or (p == 0 and q < 0):
            p, q = -p, -q
        return (p, q)
    return None


def rotation_class(
    model: SurfaceModel,
    sign: str,
    arclen: float = ROTATION_ARCLEN,
    n_seeds: int = N_ROTATION_SEEDS,
    tol: float = 1e-8,
) -> RotationClass:
    """Asymptotic projective direction of long field lines of one foliation.

    Integrates ``n_seeds`` field lines for ``arclen``, discards the first
    tenth as transient and takes the angular spread of the remaining total
    displacements as the confidence radius.
    """
    angles = []
    for sx, sy in _SEEDS[:n_seeds]:
        lp = integrate_leaf(
            model, sign, (sx, sy), arclen, tol=tol,
            store_ds=arclen * 0.1, max_steps=20_000_000,
        )
        disp = lp.points - lp.points[0]
        if float(np.max(np.hypot(disp[:, 0], disp[:, 1]))) < 10.0:
            raise FoliationError(
                "no unbounded direction: field line displacement stays "
                "bounded, which cannot happen for a nonsingular foliation"
            )
        i0 = int(np.searchsorted(lp.s, 0.1 * arclen))
        i0 = min(i0, len(lp.points) - 2)
        d = lp.points[-1] - lp.points[i0]
        angles.append(math.atan2(d[1], d[0]) % math.pi)
    mean = _circular_mean_mod_pi(angles)
    radius = max(_mod_pi_dist(a, mean) for a in angles)
    return RotationClass(
        direction=(math.cos(mean), math.sin(mean)),
        radius=radius,
        rational=_rationalize(mean),
    )


# ---------------------------------------------------------------------------
# closed-leaf census
# ---------------------------------------------------------------------------

def _transversal_order(rc: RotationClass):
    """(intercept coordinate index, event axis) for the return map."""
    if _mod_pi_dist(rc.angle, math.pi / 2) <= math.pi / 4:
        return 0, (0.0, 1.0)     # vertical-ish leaves, transversal {y = 0}
    return 1, (1.0, 0.0)         # horizontal-ish leaves, transversal {x = 0}


def _oriented_dirs_along(model: SurfaceModel, pts: np.ndarray, sign: str):
    """Oriented field directions chained along a polyline of seed points."""
    from .metric import _chain_segment

    xp, xm = oriented_null_fields(model, pts[0])
    d = tuple(xp if sign == "+" else xm)
    out = [d]
    for i in range(1, len(pts)):
        (d,) = _chain_segment(model, pts[i - 1], pts[i], (d,))
        out.append(d)
    return out


def closed_leaves(
    model: SurfaceModel,
    sign: str,
    n_scan: int = 256,
    tol: float = 1e-10,
    rc: RotationClass | None = None,
    _retry: bool = True,
) -> list:
    """Census of the closed leaves of one foliation.

    Return-map displacement zeros on a transversal circle, located by sign
    change and bisection; each root is integrated into a dense closed-leaf
    trace carrying its homology class and cycle scaling.
    """
    if rc is None:
        rc = rotation_class(model, sign)
    ti, ev_axis = _transversal_order(rc)
    grid = np.arange(n_scan) / n_scan
    if ti == 0:
        pts = np.stack([grid, np.zeros(n_scan)], axis=1)
    else:
        pts = np.stack([np.zeros(n_scan), grid], axis=1)
    dirs = _oriented_dirs_along(model, pts, sign)

    def disp(c, hint):
        p0 = (c, 0.0) if ti == 0 else (0.0, c)
        lp = integrate_leaf(
            model, sign, p0, ARCLEN_CAP, tol=tol, dir_hint=hint,
            store_ds=1e18, event=(ev_axis[0], ev_axis[1], 1.0, False),
        )
        if lp.status != engine.EVENT:
            raise FoliationError("return map undefined within the arclength cap")
        d = float(lp.points[-1][ti] - p0[ti])
        return d - round(d)  # return displacement modulo the deck lattice

    try:
        vals = np.array([disp(grid[i], dirs[i]) for i in range(n_scan)])
    except FoliationError:
        if not _retry:
            raise
        # wrong transversal guess; force the other one and retry once
        other = RotationClass(
            direction=(rc.direction[1], rc.direction[0]),
            radius=rc.radius, rational=None,
        )
        return closed_leaves(model, sign, n_scan, tol, rc=other, _retry=False)

    if float(np.max(np.abs(vals))) < 1e-9:
        return []   # every leaf closes: no isolated leaves to report

    roots = []
    for i in range(n_scan):
        j = (i + 1) % n_scan
        a, b = grid[i], grid[i] + 1.0 / n_scan
        fa, fb = vals[i], vals[j]
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0.0:
            hint = dirs[i]
            roots.append(brentq(
                lambda c: disp(c, hint), a, b, xtol=1e-12, rtol=8.9e-16,
            ))
    # deduplicate mod 1
    uniq = []
    for r in sorted(q % 1.0 for q in roots):
        if not uniq or (r - uniq[-1]) % 1.0 > 1e-8:
            if not uniq or (uniq[0] - r) % 1.0 > 1e-8:
                uniq.append(r)

    leaves = []
    for c in uniq:
        p0 = (c, 0.0) if ti == 0 else (0.0, c)
        lp = integrate_leaf(
            model, sign, p0, ARCLEN_CAP, tol=max(tol, 1e-11), store_ds=2e-4,
            event=(ev_axis[0], ev_axis[1], 1.0, False),
        )
        offset = lp.closed_offset
        if float(np.hypot(offset[0], offset[1])) > 1e-7:
            log.warning("census root %.12f did not close (offset %s)", c, offset)
            continue
        h = lp.homology()
        lam = cycle_scaling(model, lp)
        leaves.append(Leaf(
            sign=sign, intercept=float(c), homology=(int(h[0]), int(h[1])),
            lam=float(lam), points=lp.points,
        ))
    return leaves


# ---------------------------------------------------------------------------
# annuli and the atlas
# ---------------------------------------------------------------------------

def _probe_loop_character(model: SurfaceModel, c: float, axis_idx: int) -> str:
    """Causal character of the coordinate circle at intercept ``c``."""
    u = np.linspace(0.0, 1.0, 64, endpoint=False)
    if axis_idx == 0:
        xs, ys = np.full_like(u, c), u
        v = (0.0, 1.0)
    else:
        xs, ys = u, np.full_like(u, c)
        v = (1.0, 0.0)
    E, F, G = model.backend.coeffs_array(xs, ys)
    q = E * v[0] ** 2 + 2 * F * v[0] * v[1] + G * v[1] ** 2
    if float(np.max(q)) < 0.0:
        return "timelike"
    if float(np.min(q)) > 0.0:
        return "spacelike"
    return "mixed"


def _reeb_turnarounds(model, sign, lo, hi, ti, n=128) -> int:
    """Orientation changes of cut crossings of one foliation in an annulus."""
    span = (hi - lo) % 1.0 or 1.0
    cs = lo + span * (np.arange(1, n + 1) / (n + 1))
    if ti == 0:
        pts = np.stack([cs, np.zeros(n)], axis=1)
        normal = (0.0, 1.0)
    else:
        pts = np.stack([np.zeros(n), cs], axis=1)
        normal = (1.0, 0.0)
    dirs = _oriented_dirs_along(model, pts, sign)
    comp = [d[0] * normal[0] + d[1] * normal[1] for d in dirs]
    signs = [c for c in comp if abs(c) > 1e-10]
    changes = sum(
        1 for i in range(1, len(signs)) if signs[i] * signs[i - 1] < 0
    )
    return changes


def annuli(model: SurfaceModel, leaves: list, ti: int = 0) -> list:
    """Annulus decomposition between consecutive closed leaves.

    Flags whether probe loops along the leaf direction are timelike or
    spacelike and counts crossing turnarounds of each foliation along a
    cross-cut of the annulus.
    """
    if not leaves:
        flags = {_probe_loop_character(model, 0.37, 0),
                 _probe_loop_character(model, 0.37, 1)}
        return [Annulus(
            lo=0.0, hi=1.0, lo_leaf=-1, hi_leaf=-1,
            has_timelike_loop="timelike" in flags,
            has_spacelike_loop="spacelike" in flags,
            reeb={"+": 0, "-": 0},
        )]
    order = sorted(range(len(leaves)), key=lambda i: leaves[i].intercept)
    out = []
    for k in range(len(order)):
        i, j = order[k], order[(k + 1) % len(order)]
        lo = leaves[i].intercept
        hi = leaves[j].intercept if k + 1 < len(order) else leaves[j].intercept + 1.0
        span = hi - lo
        probes = [lo + span * f for f in (0.2, 0.35, 0.5, 0.65, 0.8)]
        chars = {_probe_loop_character(model, c % 1.0, ti) for c in probes}
        out.append(Annulus(
            lo=lo % 1.0, hi=hi % 1.0, lo_leaf=i, hi_leaf=j,
            has_timelike_loop="timelike" in chars,
            has_spacelike_loop="spacelike" in chars,
            reeb={s: _reeb_turnarounds(model, s, lo, hi, ti)
                  for s in ("+", "-")},
        ))
    return out


def class_AB(
    model: SurfaceModel,
    rot: dict | None = None,
    leaves: list | None = None,
) -> tuple:
    """('A' | 'B', margin).  Raises when the confidence radii straddle the
    decision boundary; integrate longer in that case."""
    if rot is None:
        rot = {s: rotation_class(model, s) for s in ("+", "-")}
    rp, rm = rot["+"], rot["-"]
    dist = rp.distance_to(rm)
    gap = rp.radius + rm.radius + 1e-3
    if dist > gap:
        return "A", dist - gap
    if leaves is None:
        leaves = []
        for s in ("+", "-"):
            leaves.extend(closed_leaves(model, s, rc=rot[s]))
    has_plus = any(l.sign == "+" for l in leaves)
    has_minus = any(l.sign == "-" for l in leaves)
    if dist <= gap and has_plus and has_minus:
        return "B", gap - dist
    raise UndeterminedClassError(
        f"rotation classes {dist:.2e} apart with confidence {gap:.2e} and "
        f"closed leaves (+:{has_plus}, -:{has_minus}); increase arclength"
    )


def build_atlas(model: SurfaceModel, n_scan: int = 256) -> FoliationAtlas:
    """Full foliation atlas: rotation classes, census, annuli, verdict."""
    rot = {s: rotation_class(model, s) for s in ("+", "-")}
    leaves = []
    all_closed = {}
    for s in ("+", "-"):
        ls = closed_leaves(model, s, n_scan=n_scan, rc=rot[s])
        all_closed[s] = not ls and _foliation_all_closed(model, s, rot[s])
        leaves.extend(ls)
    ti, _ = _transversal_order(rot["+"])
    ann = annuli(model, leaves, ti=ti)
    try:
        verdict, margin = class_AB(model, rot=rot, leaves=leaves)
    except UndeterminedClassError:
        verdict, margin = "undetermined", 0.0
    return FoliationAtlas(
        leaves=leaves, annuli=ann, rotation=rot,
        verdict=verdict, margin=margin, all_closed=all_closed,
    )


def _foliation_all_closed(model, sign, rc) -> bool:
    ti, ev_axis = _transversal_order(rc)
    for c in (0.11, 0.43, 0.77):
        p0 = (c, 0.0) if ti == 0 else (0.0, c)
        lp = integrate_leaf(
            model, sign, p0, ARCLEN_CAP, tol=1e-10, store_ds=1e18,
            event=(ev_axis[0], ev_axis[1], 1.0, False),
        )
        if lp.status != engine.EVENT:
            return False
        d = float(lp.points[-1][ti] - p0[ti])
        if abs(d - round(d)) > 1e-9:
            return False
    return True


# ---------------------------------------------------------------------------
# affiliation
# ---------------------------------------------------------------------------

def _crosses(path_pts: np.ndarray, leaf: Leaf) -> bool:
    """Did the path cross the leaf trace (torus-wrapped)?"""
    if leaf.is_vertical_line():
        rel = path_pts[:, 0] - leaf.intercept
        rel -= np.round(rel)
        return bool(np.min(rel) < -1e-9 and np.max(rel) > 1e-9)
    from .flow import _torus_dist_to_polyline

    step = max(1, len(path_pts) // 400)
    return _torus_dist_to_polyline(path_pts[::step], leaf.points) < 1e-9


def _leaf_distance(p: np.ndarray, leaf: Leaf) -> float:
    if leaf.is_vertical_line():
        d = p[0] - leaf.intercept
        return abs(d - round(d))
    from .flow import _torus_dist_to_polyline

    return _torus_dist_to_polyline(p.reshape(1, 2), leaf.points)


def affiliation(
    model: SurfaceModel,
    p,
    atlas: FoliationAtlas,
    converge_dist: float = 1e-6,
    sustain: float = 50.0,
    cap: float = ARCLEN_CAP,
) -> dict:
    """Boundary leaf each future field line through ``p`` runs into.

    Requires ``p`` to lie strictly inside an annulus of the atlas; a field
    line is affiliated to a boundary leaf once it crosses it or stays
    within ``converge_dist`` of it for ``sustain`` of arclength.
    """
    c = float(p[0]) % 1.0
    ann = atlas.annulus_of(c)
    if ann is None or ann.lo_leaf < 0:
        raise FoliationError("point is not inside an annulus bounded by leaves")
    boundary = [atlas.leaves[ann.lo_leaf], atlas.leaves[ann.hi_leaf]]
    out = {}
    for s in ("+", "-"):
        out[s] = _affiliate_one(model, s, p, boundary, converge_dist, sustain, cap)
    return out


def _affiliate_one(model, sign, p, boundary, converge_dist, sustain, cap):
    chunk = 10.0
    done = 0.0
    pos = (float(p[0]), float(p[1]))
    hint = None
    streak = {id(l): 0.0 for l in boundary}
    while done < cap:
        lp = integrate_leaf(
            model, sign, pos, chunk, tol=1e-10, dir_hint=hint, store_ds=0.05,
        )
        for leaf in boundary:
            if _crosses(lp.points, leaf):
                return leaf
        for leaf in boundary:
            ds = np.diff(lp.s, prepend=lp.s[0])
            near = np.array([
                _leaf_distance(q, leaf) < converge_dist for q in lp.points
            ])
            run = streak[id(leaf)]
            for i in range(len(near)):
                run = run + float(ds[i]) if near[i] else 0.0
                if run >= sustain:
                    return leaf
            streak[id(leaf)] = run
        pos = tuple(lp.points[-1])
        hint = tuple(lp.dirs[-1])
        done += chunk
    raise FoliationError(
        f"affiliation undecided within arclength {cap} for sign {sign}"
    )
