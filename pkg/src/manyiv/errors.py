"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`ManyIVError`
so callers (the CLI in particular) can tell data problems from estimation
failures.
"""

from __future__ import annotations


class ManyIVError(Exception):
    """Base class for library errors."""


class DataError(ManyIVError):
    """Input data violate a structural requirement (shape, rank, size)."""


class EstimationError(ManyIVError):
    """An estimator or variance formula is undefined at the given inputs."""


class DegenerateS(DataError):
    """The residual covariance estimate S is singular."""


class RankDeficient(DataError):
    """(W, Z*) does not have full column rank."""

    def __init__(self, message: str, which: str | None = None, column: int | None = None):
        super().__init__(message)
        self.which = which
        self.column = column


class TooLarge(DataError):
    """A dense n x n computation was requested above the configured cap."""


class DegenerateDesign(DataError):
    """Annihilator power sums are too small to estimate higher moments."""


class Unidentified(EstimationError):
    """The estimator's defining ratio or system is singular."""


class WeakInstruments(EstimationError):
    """The estimated instrument strength is on the boundary (lambda = 0)."""


class JustIdentified(EstimationError):
    """An overidentification test was requested with a single instrument."""


class NoConvergence(EstimationError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class SpecError(ManyIVError):
    """A Monte Carlo experiment specification is invalid."""
