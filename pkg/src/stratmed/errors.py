"""Exception types shared across the package.

Two families matter for scripting: :class:`InvalidInputError` (bad data or
arguments, CLI exit code 2) and :class:`NumericalError` (estimation failed,
CLI exit code 1).
"""


class StratmedError(Exception):
    """Base class for all package errors."""


class InvalidInputError(StratmedError):
    """Malformed records, dimension mismatches, or schema violations."""


class OutOfSupportError(InvalidInputError):
    """Evaluation requested beyond the last jump time of a step hazard."""


class NumericalError(StratmedError):
    """Base class for numerical failures during estimation."""


class SolverFailureError(NumericalError):
    """An inner Newton solve did not reach its tolerance."""

    def __init__(self, message: str, residual_norm: float | None = None):
        super().__init__(message)
        self.residual_norm = residual_norm


class RankDeficiencyError(NumericalError):
    """Singular Jacobian or Hessian: covariates concentrated on a hyperplane,
    or complete separation in the membership model."""


class NumericalDegeneracyError(NumericalError):
    """All mixture components underflowed to zero for some subject."""

    def __init__(self, message: str, subject_ids=()):
        super().__init__(message)
        self.subject_ids = tuple(subject_ids)


class DegenerateRiskSetError(NumericalError):
    """A hazard-jump update hit an empty (zero-weight) risk set."""

    def __init__(self, message: str, jump_time: float | None = None):
        super().__init__(message)
        self.jump_time = jump_time


class DegenerateStratumError(NumericalError):
    """A stratum's total membership weight is numerically zero."""


class UnreliableInferenceError(NumericalError):
    """Too large a fraction of bootstrap resamples failed to converge."""
