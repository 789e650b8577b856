"""Exception types shared across the package."""


class DebiasOptError(Exception):
    """Base class for all package errors."""


class ShapeError(DebiasOptError, ValueError):
    """Array dimensions do not agree."""


class ConfigError(DebiasOptError, ValueError):
    """A run configuration failed schema validation."""


class DataError(DebiasOptError, ValueError):
    """A dataset is malformed or incompatible with the requested method."""


class DivergenceError(DebiasOptError, ArithmeticError):
    """An iterative method produced a non-finite or exploding value.

    ``trace`` holds whatever partial trace the method had recorded.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
