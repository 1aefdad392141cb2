"""Acoustic anomaly detection for industrial machines.

Log-Mel features, a dense autoencoder baseline and deep SVDD (one-class and
soft-boundary) built on a small numpy autodiff core.
"""

__version__ = "0.1.0"


class AadError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(AadError):
    pass


class UnsupportedFormatError(FormatError):
    def __init__(self, message, format_code=None):
        super().__init__(message)
        self.format_code = format_code


class DimensionError(AadError, ValueError):
    pass


class ConfigurationError(AadError, ValueError):
    pass


class EmptyInputError(AadError, ValueError):
    pass


class UsageError(AadError, RuntimeError):
    pass


class DivergenceError(AadError, RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
