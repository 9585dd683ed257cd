"""Exception hierarchy. The CLI maps each family to a stable exit code."""

from __future__ import annotations


class TailTreatError(Exception):
    """Base class for all package errors."""


class DataError(TailTreatError, ValueError):
    """Invalid input data. ``row`` is 1-based over data rows, ``column`` a name."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class IdentificationError(DataError):
    """The design cannot identify complier effects (e.g. a constant instrument)."""


class EstimationError(TailTreatError, RuntimeError):
    """A fitting routine failed."""


class DegenerateProblemError(EstimationError):
    """Quantile regression problem is rank deficient or carries no weight."""


class SeparationError(EstimationError):
    """Probit likelihood is unbounded (perfect or quasi-perfect separation)."""


class ConvergenceError(EstimationError):
    """An iterative solver hit its iteration cap."""


class InferenceError(TailTreatError, RuntimeError):
    """Covariance or band construction failed."""
