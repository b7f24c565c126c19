"""Shape-constrained additive B-spline surrogates for mixed-integer
nonlinear programs, with a built-in branch-and-bound solver and local
refinement."""

from .problems import (
    MissocConfig,
    MissocReport,
    ProblemInstance,
    load_instance,
    parse_instance,
    run_missoc,
    sample_training,
)
from .regression import fit_additive
from .shapecon import ShapeSpec, fit_constrained
from .surrogate import build_surrogate

__version__ = "0.1.0"

__all__ = [
    "MissocConfig",
    "MissocReport",
    "ProblemInstance",
    "ShapeSpec",
    "build_surrogate",
    "fit_additive",
    "fit_constrained",
    "load_instance",
    "parse_instance",
    "run_missoc",
    "sample_training",
    "__version__",
]
