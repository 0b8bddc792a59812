"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 1,
data problems exit 2 and numeric failures exit 3.
"""


class DenseCapError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(DenseCapError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(DenseCapError, ValueError):
    """A value lies outside the domain of a function (e.g. log of 0)."""


class ConfigError(DenseCapError, ValueError):
    """Invalid configuration value or combination."""


class UsageError(DenseCapError, ValueError):
    """An API was called in a way its contract does not allow."""


class DataError(DenseCapError):
    """Input data on disk is malformed, missing or corrupt."""


class CheckpointError(DataError):
    """Checkpoint container failed validation (checksum, magic, version)."""


class GenerationError(DataError):
    """The synthetic scene generator could not satisfy its configuration."""


class NumericError(DenseCapError, ArithmeticError):
    """A forward op produced NaN/Inf or a loss diverged."""
