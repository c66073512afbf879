"""Exception hierarchy.

Three roots map onto CLI exit codes: ``ConfigError`` (2), ``DataError`` (3)
and ``NumericalError`` (4).
"""


class MVECFError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MVECFError):
    pass


class DataError(MVECFError):
    pass


class NumericalError(MVECFError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDataError(DataError):
    pass


class MomentUndefinedError(DataError):
    pass


class CoverageError(DataError):
    def __init__(self, message, missing=()):
        self.missing = list(missing)
        super().__init__(message)


class InsufficientUniverseError(DataError):
    pass


class ZeroRiskError(NumericalError):
    pass


class UndefinedCorrelationError(NumericalError):
    pass


class SingularityError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class DivergenceError(NumericalError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)


class SamplingStarvationError(NumericalError):
    def __init__(self, message, user=None):
        self.user = user
        super().__init__(message)


class ThresholdUndefinedError(NumericalError):
    pass
