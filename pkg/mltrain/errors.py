"""
Exception types raised across the package.

Each error also derives from the closest builtin so callers that only know
about ValueError / IndexError / ... still catch it.
"""


class MultilevelError(Exception):
    pass


class ShapeError(MultilevelError, ValueError):
    pass


class NumericError(MultilevelError, ArithmeticError):
    pass


class TokenIndexError(MultilevelError, IndexError):
    pass


class ContractError(MultilevelError, RuntimeError):
    pass


class ConfigError(MultilevelError, ValueError):
    pass


class InputError(MultilevelError, ValueError):
    pass


class ScheduleExhaustedError(MultilevelError, IndexError):
    pass


class AggregationError(MultilevelError, ValueError):
    pass


class TrainingDivergedError(NumericError):
    # @step: fine step at which the loss went non-finite
    # @checkpoint: path of the last-good checkpoint written before raising
    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint
