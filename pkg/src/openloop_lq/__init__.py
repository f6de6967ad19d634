"""Deterministic (open-loop) optimal control of Ito stochastic LQ systems."""

from .errors import DivergenceError, PositivityError, SizeError, SpecError
from .problem_model import (
    CoefficientProvider,
    CoefficientSet,
    ControlTrajectory,
    Modulation,
    ProblemSpec,
    TimeGrid,
    coefficients_at,
    load_spec,
    validate,
)

__all__ = [
    "CoefficientProvider",
    "CoefficientSet",
    "ControlTrajectory",
    "DivergenceError",
    "Modulation",
    "PositivityError",
    "ProblemSpec",
    "SizeError",
    "SpecError",
    "TimeGrid",
    "coefficients_at",
    "load_spec",
    "validate",
]

__version__ = "0.1.0"
