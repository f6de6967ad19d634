"""Exception types shared by the solvers and the CLI."""

from __future__ import annotations


class SpecError(ValueError):
    """Problem specification violates a structural or assumption invariant."""

    def __init__(self, message: str, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class PositivityError(ArithmeticError):
    """The weight matrix that must be positive definite is not.

    ``t`` is the earliest offending time (``None`` when the failure is not
    tied to a time, e.g. a non-strictly-convex QP Hessian).
    """

    def __init__(self, message: str, t: float | None = None, min_eig: float | None = None,
                 times=()):
        super().__init__(message)
        self.t = t
        self.min_eig = min_eig
        self.times = tuple(times)


class DivergenceError(ArithmeticError):
    """Non-finite values appeared during integration or propagation."""

    def __init__(self, message: str, location=None):
        super().__init__(message)
        self.location = location


class SizeError(ValueError):
    """Requested instance exceeds an enumeration cap."""
