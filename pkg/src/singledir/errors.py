"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so front ends can translate
failures without string matching.
"""


class SingleDirError(Exception):
    exit_code = 1


class ConfigError(SingleDirError, ValueError):
    """Invalid architecture, shapes, or experiment configuration."""

    exit_code = 2


class PlanError(ConfigError):
    """An intervention references a layer or unit that does not exist."""


class StateError(SingleDirError, RuntimeError):
    exit_code = 2


class PreconditionError(SingleDirError, ValueError):
    exit_code = 2


class DataFormatError(SingleDirError, ValueError):
    """Malformed or inconsistent dataset file."""

    exit_code = 3


class NumericError(SingleDirError, ArithmeticError):
    """Non-finite gradients or a diverging loss."""

    exit_code = 4

    def __init__(self, message, *, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch
