"""Numerical toolkit for closed geodesics on Lorentzian tori and Klein bottles.

Modules
-------
metric      metric families, pointwise evaluation, causal classification
flow        geodesic and null field-line integration, cycle scaling
foliation   closed-leaf census, annuli, rotation classes, class A/B
search      periodic shooting, causal length maximiser, surveys
classify    rotation numbers, the invariant k, prediction reports
cli         command-line front end and config files
"""

from .metric import (
    SurfaceModel,
    MetricValue,
    ChristoffelValue,
    ModelError,
    eval_metric,
    christoffels,
    causal_type,
    null_directions,
    verify_lorentzian,
)

__version__ = "0.1.0"

__all__ = [
    "SurfaceModel", "MetricValue", "ChristoffelValue", "ModelError",
    "eval_metric", "christoffels", "causal_type", "null_directions",
    "verify_lorentzian", "__version__",
]
