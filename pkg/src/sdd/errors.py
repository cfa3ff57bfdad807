"""Exception types raised across the package."""


class SDDError(Exception):
    """Base class for all package errors."""


class ShapeError(SDDError, ValueError):
    pass


class NumericError(SDDError, FloatingPointError):
    pass


class ConfigError(SDDError, ValueError):
    pass


class ConditionError(SDDError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown condition"


class TimestepError(SDDError, IndexError):
    pass


class DomainError(SDDError, ValueError):
    pass


class SelectionError(SDDError, ValueError):
    pass


class TrainingError(SDDError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
