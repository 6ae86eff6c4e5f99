"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: DataError (and subclasses) -> 2,
NumericalError -> 3, usage problems -> 1.
"""


class FedKalmanError(Exception):
    """Base class for all package errors."""


class DataError(FedKalmanError):
    """Bad inputs: malformed files, shape mismatches, invalid configs."""


class ConfigError(DataError):
    """Invalid or unknown experiment-config content."""


class CheckpointError(DataError):
    """Corrupt, truncated, or inconsistent checkpoint files."""


class NumericalError(FedKalmanError):
    """Numerical failure: singular matrices, non-finite values, divergence."""
