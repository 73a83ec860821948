"""Exception types raised across the package."""


class DegsdeError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(DegsdeError):
    pass


class DimensionMismatch(DegsdeError, ValueError):
    pass


class QuadratureFailure(DegsdeError):
    pass


class ReversedInterval(DegsdeError, ValueError):
    pass


class OutOfGrid(DegsdeError, ValueError):
    pass


class DegenerateCovariance(DegsdeError):
    pass


class UnsupportedOrder(DegsdeError, ValueError):
    pass


class ZeroAlpha(DegsdeError, ValueError):
    pass


class EmptyEnsemble(DegsdeError, ValueError):
    pass


class MissingDerivativeField(DegsdeError):
    pass


class InadmissibleVariant(DegsdeError, ValueError):
    pass


class QuadratureBudgetExceeded(DegsdeError):
    pass


class NoContraction(DegsdeError):
    """Picard iterates stopped contracting; the horizon is likely too long."""

    def __init__(self, message, ratios=()):
        super().__init__(message)
        self.ratios = list(ratios)


class InvalidGamma(DegsdeError, ValueError):
    pass
