"""Exception hierarchy shared by every FireSight module.

The CLI maps these onto exit codes: ValidationError -> 2, anything else
derived from FireSightError -> 1.
"""
from __future__ import annotations

from typing import Any, Optional


class FireSightError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ValidationError(FireSightError, ValueError):
    """Bad input: wrong counts, malformed files, unknown config keys."""

    exit_code = 2


class ShapeMismatchError(ValidationError):
    pass


class ArityError(ValidationError):
    pass


class NumericalError(FireSightError, ArithmeticError):
    """A computation could not produce a valid result."""


class DegenerateConfigurationError(NumericalError):
    pass


class PointAtInfinityError(NumericalError):
    pass


class PointBehindCameraError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class NoOverlapError(NumericalError):
    pass


class RefinementDivergedError(NumericalError):
    """LM damping overflowed without ever reducing the cost."""

    def __init__(self, message: str, best: Optional[Any] = None):
        super().__init__(message)
        self.best = best


class StateError(FireSightError, RuntimeError):
    """An object was used in the wrong lifecycle state."""
