"""Exception hierarchy shared by all propmap modules."""


class PropmapError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PropmapError, ValueError):
    """An input violates a documented precondition."""


class CholeskyError(PropmapError, ArithmeticError):
    """Covariance factorization failed even at the largest jitter level."""

    def __init__(self, message, jitter):
        super().__init__(message)
        self.jitter = jitter


class FitError(PropmapError, ArithmeticError):
    """A local polynomial fit could not be computed."""


class UnderdeterminedError(FitError):
    """Fewer positively weighted samples than polynomial coefficients."""


class SingularFitError(FitError):
    """The weighted normal matrix is too badly conditioned to invert."""


class ZeroWeightSumError(FitError):
    """All kernel or centroid weights vanish."""


class NoFeasibleWindowError(PropmapError):
    """No window in the search range meets the sampling-ratio constraint."""


class GuardExhaustedError(PropmapError):
    """Row/column coverage still incomplete after the escalation limit."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InfeasibleIntervalError(PropmapError, ValueError):
    """A trust interval is empty (lower bound above upper bound)."""


class ZeroMatrixError(PropmapError, ValueError):
    """Peak localization was asked to work on an all-zero matrix."""


class ParseError(PropmapError, ValueError):
    """A measurement or observation file could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class OutOfAreaError(ParseError):
    """An ingested location falls outside the configured area."""
