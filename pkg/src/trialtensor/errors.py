"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
``DataError`` exits 2 and ``NumericalError`` exits 3.
"""


class TrialTensorError(Exception):
    """Base class for package-specific errors."""


class DataError(TrialTensorError):
    """Malformed, inconsistent or out-of-contract input data."""


class NumericalError(TrialTensorError):
    """Linear-algebra failure (non-SPD matrix after the jitter retry)."""
