"""Exception hierarchy shared by all modules."""


class HypocertError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(HypocertError, ValueError):
    """An input breaks a documented precondition (shape, sign, positivity)."""


class UnsupportedOperation(HypocertError, NotImplementedError):
    pass


class CertificationInfeasible(HypocertError):
    """No certificate can be produced from the given ingredients."""


class SolverError(HypocertError):
    """An iterative solver failed; ``history`` holds its residual trail."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class GridTooSmallError(HypocertError):
    pass


class CFLViolationError(HypocertError):
    def __init__(self, message, suggested_dt):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class DivergenceError(HypocertError):
    pass


class InapplicableError(HypocertError):
    """A formula's hypotheses do not hold for the supplied numbers."""


class DataQualityError(HypocertError):
    pass


class ConfigError(HypocertError):
    pass
