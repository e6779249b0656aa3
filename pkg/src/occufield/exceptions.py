"""Exception hierarchy.

Each CLI-facing error carries the process exit code it maps to.
"""


class OccufieldError(Exception):
    exit_code = 1


class VerificationError(OccufieldError):
    exit_code = 1


class ConfigurationError(OccufieldError, ValueError):
    exit_code = 2


class NumericError(OccufieldError, ArithmeticError):
    """Non-finite value encountered during evaluation or differentiation."""

    exit_code = 3

    def __init__(self, message, node=None, pixel=None, ray=None):
        super().__init__(message)
        self.node = node
        self.pixel = pixel
        self.ray = ray


class DegenerateGradientError(NumericError):
    """Spatial gradient norm too small to define a normal."""


class TapeStateError(OccufieldError, RuntimeError):
    """A tape was used after its reverse sweep already ran."""


class DivergenceError(OccufieldError):
    exit_code = 4
