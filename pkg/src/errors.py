"""Exception types shared across the package."""


class SparseAlignError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SparseAlignError, ValueError):
    """Invalid run configuration or invalid arguments."""


class DataError(SparseAlignError, ValueError):
    """Input data that cannot be processed (bad files, shape mismatches, ...)."""


class OptimizationError(DataError):
    """A numerical step produced unusable values."""
