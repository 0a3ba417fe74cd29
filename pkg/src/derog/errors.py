"""Exception hierarchy shared by every module."""


class DerogError(Exception):
    """Base class for all package errors."""


class DimensionError(DerogError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(DerogError, ValueError):
    """Invalid configuration, unknown option or unsupported op kind."""


class UsageError(DerogError, RuntimeError):
    """API misuse, e.g. running backward twice on one tape."""


class NumericError(DerogError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DataError(DerogError, ValueError):
    """Malformed or invalid input data."""


class ParseError(DataError):
    """A file could not be parsed."""


class ValidationError(DataError):
    """Parsed data violates a model invariant."""


class IncompatibleCheckpointError(DataError):
    """Checkpoint was written by an unsupported format version."""


class UndefinedMetricError(DerogError, ValueError):
    """A metric is undefined on the given labels."""
