"""Exception types shared across the package.

Each class maps to one CLI exit code (see :mod:`advpriv.cli`).
"""


class AdvPrivError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(AdvPrivError, ValueError):
    exit_code = 2


class RejectedInputError(AdvPrivError, ValueError):
    """Malformed or out-of-domain input (shapes, labels, CSV content)."""

    exit_code = 3


class DegenerateLabelError(RejectedInputError):
    """A label column that is constant and cannot be learned."""


class DegenerateSubsetError(RejectedInputError):
    """A filtered subset that is empty or lacks one of the classes."""


class ProtocolError(AdvPrivError, RuntimeError):
    """Operations invoked out of order (backward before forward, etc.)."""

    exit_code = 1


class NumericalFaultError(AdvPrivError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class IntegrityError(AdvPrivError, RuntimeError):
    exit_code = 4


class CalibrationError(AdvPrivError):
    """No decision threshold reaches the minimum recall."""

    exit_code = 5


class MissingArtifactError(RejectedInputError):
    """A model file or manifest that a command depends on does not exist."""
