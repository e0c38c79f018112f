"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class OtfpfError(Exception):
    """Base class for all package errors."""


class ConfigError(OtfpfError):
    """Invalid or inconsistent configuration."""


class DataError(OtfpfError):
    """Missing, malformed, or mismatched input data."""


class NumericalError(OtfpfError):
    """Non-finite values or a numerically failed computation."""


class ShapeError(DataError):
    """Operand shapes incompatible with an operation."""


class GraphError(OtfpfError):
    """Gradient requested for a computation that was not recorded."""
