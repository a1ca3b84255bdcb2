"""Shared exception types."""


class ConfigurationError(ValueError):
    """Invalid shapes, specs, or config values."""


class PreconditionError(ValueError):
    """An operation was called with arguments violating its contract."""


class UnsupportedOperationError(TypeError):
    """The autodiff engine was asked for a primitive it does not provide."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
