"""Exception hierarchy shared by all vibronic modules."""


class VibronicError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(VibronicError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(VibronicError, ValueError):
    """Invalid or inconsistent configuration (grids, scene, priors, bands)."""


class NumericalError(VibronicError, ArithmeticError):
    """A computation produced results that fail an internal sanity check."""


class FormatError(VibronicError, ValueError):
    """Malformed input file (time-tag binary, CSV, JSON schema)."""


class StreamError(VibronicError, ValueError):
    """Time-tag stream violates a precondition (unsorted, empty, unknown channel)."""
