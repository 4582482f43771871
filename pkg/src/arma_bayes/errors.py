"""Exception hierarchy shared by all modules."""


class ArmaBayesError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameter(ArmaBayesError, ValueError):
    """Parameter vector outside the validated region."""


class NonStationary(InvalidParameter):
    pass


class NonInvertible(InvalidParameter):
    pass


class DimensionMismatch(ArmaBayesError, ValueError):
    pass


class OrderUnsupported(ArmaBayesError, ValueError):
    pass


class NotPositiveDefinite(ArmaBayesError, ArithmeticError):
    pass


class SingularMatrix(ArmaBayesError, ArithmeticError):
    pass


class QuadratureNotConverged(ArmaBayesError, ArithmeticError):
    pass


class StencilOutOfDomain(ArmaBayesError, ValueError):
    """A finite-difference stencil would leave the validated region."""


class DidNotConverge(ArmaBayesError, RuntimeError):
    pass


class HessianNotPD(ArmaBayesError, RuntimeError):
    pass


class NonPositiveDensity(ArmaBayesError, ValueError):
    pass


class TooManyFitFailures(ArmaBayesError, RuntimeError):
    pass


class ConfigInvalid(ArmaBayesError, ValueError):
    """Raised for malformed experiment configs; ``key`` names the culprit."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class OracleRegionTruncated(UserWarning):
    """Posterior mass close to the edge of the integration region."""
