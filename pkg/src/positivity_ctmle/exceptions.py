"""Exception types raised by the estimation routines."""

from __future__ import annotations


class EstimationError(Exception):
    """Base class for numerical failures in this package."""


class ConvergenceError(EstimationError):
    """An iterative solver stopped before meeting its tolerance.

    The last iterate is kept on ``last_iterate`` so callers can inspect it.
    """

    def __init__(self, message: str, last_iterate=None, iterations: int = 0):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class SingularDesignError(EstimationError):
    """The (weighted) normal equations are not positive definite."""


class DegenerateCovariateError(EstimationError):
    """The fluctuation covariate is identically zero."""


class DegenerateOutcomeError(EstimationError):
    """The outcome is constant and cannot be bounded to [0, 1]."""


class EmptyArmError(EstimationError):
    """A treatment arm has no observations."""


class InsufficientDataError(EstimationError):
    """Too few observations for the requested computation."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class EmptyInputError(ValueError):
    """An operation received an empty vector."""
