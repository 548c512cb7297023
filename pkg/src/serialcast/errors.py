"""Exception types shared across the package."""


class SerialcastError(Exception):
    """Base class for all package errors."""


class ConfigError(SerialcastError):
    """Invalid configuration: bad shapes, out-of-range structural settings."""


class InputError(SerialcastError):
    """Invalid runtime input: empty series, missing targets, bad spec values."""


class NumericError(SerialcastError):
    """Non-finite values where finite ones are required."""


class CheckpointError(SerialcastError):
    """Malformed, truncated, or incompatible checkpoint file."""


class SamplerError(SerialcastError):
    """No eligible data for the requested window/sample."""


class DataError(SerialcastError):
    """Corrupt or unreadable shard/manifest/CSV data."""
