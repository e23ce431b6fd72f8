"""Exception types shared across the package."""


class EventSleepError(Exception):
    """Base class for all package errors."""


class FormatError(EventSleepError, ValueError):
    """A file or in-memory structure does not match its declared format."""


class ParameterError(EventSleepError, ValueError):
    """An argument or configuration value is outside its valid domain."""


class UndefinedMetricError(EventSleepError, ValueError):
    """A metric is mathematically undefined for the given inputs."""


class NumericError(EventSleepError, ArithmeticError):
    """A computation produced non-finite values."""
