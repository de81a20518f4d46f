"""Shared exception types, mapped to CLI exit codes in :mod:`diqre.cli`."""


class ParameterError(ValueError):
    """A parameter is outside its documented domain."""


class InsufficientDataError(ValueError):
    """A count table has an empty input class."""


class OptimizationError(RuntimeError):
    """An iterative solver failed to converge.

    Carries the best iterate and residuals so callers can inspect what was
    reached before giving up.
    """

    def __init__(self, message, best=None, residuals=None):
        super().__init__(message)
        self.best = best
        self.residuals = residuals


class InfeasiblePlanError(RuntimeError):
    """No protocol plan satisfies the requested parameters."""


class SeedUnderflowError(RuntimeError):
    """The seed bit stream ran out mid-run; the transcript so far is preserved."""

    def __init__(self, message, transcript=None):
        super().__init__(message)
        self.transcript = transcript


class ProtocolFailureError(RuntimeError):
    """A protocol stage was invoked in a state it refuses (e.g. extraction
    without a success certificate)."""


class PrecisionError(RuntimeError):
    """A floating-point transform failed its exactness audit."""


class AuditError(RuntimeError):
    """A re-verification audit found a violated contract."""
