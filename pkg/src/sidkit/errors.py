"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class SidkitError(Exception):
    """Base class for all package errors."""


class ConfigError(SidkitError):
    """Invalid configuration or CLI usage."""


class DataError(SidkitError):
    """Malformed or inconsistent input data."""


class ShapeError(DataError):
    """Tensor dimension mismatch; message names both dimensions."""


class NumericalError(SidkitError):
    """Non-finite values or diverging computations."""
