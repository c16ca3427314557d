"""Extremum seeking for uncertain quadratic maps under large input and output delays."""

__version__ = "0.1.0"

from .core_model import (  # noqa: E402
    DelayProfile,
    QuadraticMapSpec,
    TuningConfig,
    ValidatedProblem,
    Variant,
    problem_from_dict,
    validate_problem,
)
from .analysis import analyze, find_eps_star, refine_ultimate_bound  # noqa: E402
from .dde_sim import SimConfig, simulate  # noqa: E402

__all__ = [
    "DelayProfile",
    "QuadraticMapSpec",
    "SimConfig",
    "TuningConfig",
    "ValidatedProblem",
    "Variant",
    "analyze",
    "find_eps_star",
    "problem_from_dict",
    "refine_ultimate_bound",
    "simulate",
    "validate_problem",
    "__version__",
]
