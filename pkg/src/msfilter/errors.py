"""Exception and warning classes raised by msfilter."""


class MsFilterError(Exception):
    """Base class for all library errors."""


class NumericalFailure(MsFilterError):
    """Base class for errors that indicate a numerical breakdown."""


class NonPositiveDefinite(NumericalFailure):
    pass


class FactorizationFailure(NumericalFailure):
    pass


class StepTooCoarse(MsFilterError):
    """Time step does not resolve the fast scale (dt > c * eps**2)."""


class NumericalBlowup(NumericalFailure):
    pass


class PSDViolation(NumericalFailure):
    pass


class WeightCollapse(NumericalFailure):
    pass


class ZeroMass(NumericalFailure):
    pass


class GridEscape(NumericalFailure):
    pass


class CovarianceBlowup(NumericalFailure):
    pass


class GridMismatch(MsFilterError):
    pass


class ConfigError(MsFilterError):
    pass


class ErgodicityWarning(UserWarning):
    """Effective sample size of a stationary estimate fell below the floor."""


class TruncationWarning(UserWarning):
    """Semigroup tail at t_max is not negligible."""
