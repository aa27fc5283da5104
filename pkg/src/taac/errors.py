"""Error categories shared across modules."""


class TaacError(Exception):
    """Base class for all package errors."""


class ConfigError(TaacError, ValueError):
    """Invalid configuration or parameter value."""


class DimensionError(TaacError, ValueError):
    """Operand shapes do not agree."""


class DegenerateInputError(TaacError, ValueError):
    """Input that makes an operation undefined (all-zero signal, batch of one)."""


class EmptyResultError(TaacError, LookupError):
    """A filter produced nothing."""


class NumericError(TaacError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(TaacError, ValueError):
    """Malformed file content."""
