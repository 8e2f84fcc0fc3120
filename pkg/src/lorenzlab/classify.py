"""Homotopy invariants of the metric and the prediction report.

The rotation number of a deck class is the winding degree of a causally
constant unit vector field along a representative loop, computed in the
flat global frame.  Only absolute values and gcds are convention
independent, so reports assert those.  The invariant ``kg`` (the positive
generator of the image of the degree homomorphism) controls the predicted
closed-leaf and closed-geodesic counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .metric import LiftError, SurfaceModel, _chain_segment, eval_metric, oriented_null_fields

__all__ = [
    "OrientabilityError", "SurfaceReport",
    "rotation_number", "compute_kg", "predicted_counts", "build_report",
]

_BASEPT = (0.31, 0.42)
_MIN_REFINE = 1e-5


class OrientabilityError(RuntimeError):
    """The degree along the loop is not an integer: the model is not both
    time and space orientable, so rotation numbers are undefined."""


def _wrap_pi(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _axis_angle_sweep(model: SurfaceModel, p0, p1, pair, angle0: float):
    """March from p0 to p1 chaining the future null pair; return the lifted
    cone-axis angle and the chained pair at p1.

    Sampling is refined until consecutive axis angles differ by less than
    pi/4; persisting jumps below the minimal step raise LiftError.
    """
    seg = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    length = float(np.hypot(seg[0], seg[1]))
    n = max(2, int(math.ceil(length / 0.02)))
    while True:
        ok = True
        pair_run = pair
        angle = angle0
        prev = np.asarray(p0, dtype=float)
        for i in range(1, n + 1):
            q = np.asarray(p0, dtype=float) + seg * (i / n)
            pair_run2 = _chain_segment(model, prev, q, pair_run)
            a = _bisector_angle(model, q, pair_run2)
            d = _wrap_pi(a - angle)
            if abs(d) > math.pi / 4:
                ok = False
                break
            angle += d
            pair_run = pair_run2
            prev = q
        if ok:
            return angle, pair_run
        if length / n < _MIN_REFINE:
            raise LiftError("cone axis rotates too fast along the loop")
        n *= 2


def _bisector_angle(model, p, pair) -> float:
    da, db = pair
    m = eval_metric(model, p)
    dbc = db if m.apply(da, db) < 0 else (-db[0], -db[1])
    return math.atan2(da[1] + dbc[1], da[0] + dbc[0])


def rotation_number(model: SurfaceModel, sigma) -> int:
    """Winding degree of the timelike cone-axis field along the deck class
    ``sigma``, measured over a straight-line representative loop."""
    p, q = int(sigma[0]), int(sigma[1])
    if p == 0 and q == 0:
        return 0
    base = np.array(_BASEPT)
    end = base + (p, q)
    xp, xm = oriented_null_fields(model, base)
    pair = (tuple(xp), tuple(xm))
    a0 = _bisector_angle(model, base, pair)
    a1, pair1 = _axis_angle_sweep(model, base, end, pair, a0)
    turns = (a1 - a0) / (2.0 * math.pi)
    # the chained pair at base + sigma must reproduce the field at base
    xp_e, xm_e = oriented_null_fields(model, end)
    if (np.dot(xp_e, pair1[0]) < 0.999) or (np.dot(xm_e, pair1[1]) < 0.999):
        raise OrientabilityError(
            f"null fields do not return to themselves along {sigma}: "
            "model is not time and space orientable"
        )
    n = round(turns)
    if abs(turns - n) > 1e-6:
        raise OrientabilityError(
            f"degree along {sigma} is {turns:.8f}, not an integer"
        )
    return int(n)


def degree_along(model: SurfaceModel, waypoints) -> float:
    """Raw (unrounded) cone-axis winding along a polyline of cover points.

    Exposed for representative-independence tests; the polyline should be
    closed modulo the deck lattice.
    """
    pts = np.asarray(waypoints, dtype=float)
    xp, xm = oriented_null_fields(model, pts[0])
    pair = (tuple(xp), tuple(xm))
    angle = _bisector_angle(model, pts[0], pair)
    a0 = angle
    for i in range(1, len(pts)):
        angle, pair = _axis_angle_sweep(model, pts[i - 1], pts[i], pair, angle)
    return (angle - a0) / (2.0 * math.pi)


def compute_kg(model: SurfaceModel) -> int:
    """gcd of the rotation numbers over the standard generators.

    The degree map is a homomorphism into the integers, so the gcd is the
    positive generator of its image; gcd(0, 0) = 0.
    """
    n10 = rotation_number(model, (1, 0))
    n01 = rotation_number(model, (0, 1))
    return math.gcd(abs(n10), abs(n01))


def predicted_counts(kg: int) -> tuple:
    """(closed leaves, closed timelike, closed spacelike) lower bounds."""
    kg = int(kg)
    return (4 * kg, 2 * kg, 2 * kg)


@dataclass
class SurfaceReport:
    """Invariants, counts, predictions and verdicts for one model."""

    schema: int
    model: str
    topology: str
    rotation_numbers: dict
    kg: int
    surface_class: str
    rotation_classes: dict
    leaf_count: int
    counts: dict                  # causal type -> number of records (cover)
    distinct_counts: dict         # after glide identification (klein)
    predicted: dict
    checks: dict
    passed: bool
    timings: dict = field(default_factory=dict)

    def to_dict(self, with_timings: bool = True) -> dict:
        d = {
            "schema": self.schema,
            "model": self.model,
            "topology": self.topology,
            "rotation_numbers": dict(self.rotation_numbers),
            "kg": self.kg,
            "class": self.surface_class,
            "rotation_classes": self.rotation_classes,
            "leaf_count": self.leaf_count,
            "counts": dict(self.counts),
            "distinct_counts": dict(self.distinct_counts),
            "predicted": dict(self.predicted),
            "checks": dict(self.checks),
            "passed": self.passed,
        }
        if with_timings:
            d["timings"] = dict(self.timings)
        return d

    def to_json(self, with_timings: bool = True, **kw) -> str:
        return json.dumps(self.to_dict(with_timings), sort_keys=True, **kw)


def build_report(model: SurfaceModel, atlas, result, timings=None) -> SurfaceReport:
    """Assemble counts versus predictions and the multiplicity floors.

    ``result`` is a survey result carrying ``records`` (deduplicated on
    the cover) and ``distinct`` (after glide identification on the Klein
    bottle).  Failed checks are recorded verdicts, never exceptions.
    """
    n10 = rotation_number(model, (1, 0))
    n01 = rotation_number(model, (0, 1))
    kg = math.gcd(abs(n10), abs(n01))
    leaves, timelike, spacelike = predicted_counts(kg)

    counts = {"timelike": 0, "spacelike": 0, "lightlike": 0}
    for r in result.records:
        counts[r.causal_type] += 1
    distinct = {"timelike": 0, "spacelike": 0, "lightlike": 0}
    for r in result.distinct:
        distinct[r.causal_type] += 1

    n_leaves = len(atlas.leaves)
    total = sum(counts.values())
    definite = counts["timelike"] + counts["spacelike"]
    checks = {
        "leaves_at_least_4kg": n_leaves >= leaves,
        "timelike_at_least_2kg": counts["timelike"] >= timelike,
        "spacelike_at_least_2kg": counts["spacelike"] >= spacelike,
        "two_closed_orbits": total >= 2,
        "one_definite": definite >= 1,
        "orientable_four_orbits": total >= 4,
        "orientable_two_definite": definite >= 2,
    }
    return SurfaceReport(
        schema=1,
        model=model.label,
        topology=model.topology,
        rotation_numbers={"(1,0)": n10, "(0,1)": n01},
        kg=kg,
        surface_class=atlas.verdict,
        rotation_classes={s: r.to_dict() for s, r in atlas.rotation.items()},
        leaf_count=n_leaves,
        counts=counts,
        distinct_counts=distinct,
        predicted={"leaves": leaves, "timelike": timelike, "spacelike": spacelike},
        checks=checks,
        passed=all(checks.values()),
        timings=dict(timings or {}),
    )
