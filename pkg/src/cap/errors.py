"""Exception types shared across the engine."""


class CapError(Exception):
    """Base class for all engine errors."""


class FormatError(CapError):
    """Malformed or incompatible binary file (bad magic, version, truncation)."""


class DataError(CapError):
    """Invalid input data (dimension mismatch, duplicate ids, degenerate norms)."""


class ConfigError(CapError):
    """Invalid configuration value or unknown configuration key."""


class NumericalError(CapError):
    """A computation produced non-finite values."""
