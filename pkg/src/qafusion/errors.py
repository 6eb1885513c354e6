"""Exception types shared across the package.

The CLI maps each class to a distinct exit code.
"""


class QafError(Exception):
    """Base class for all package errors."""


class ConfigError(QafError, ValueError):
    """Bad configuration or command-line usage (exit code 1)."""


class DataError(QafError, ValueError):
    """Input data violates a documented contract (exit code 2)."""


class InvariantError(QafError, RuntimeError):
    """An internal invariant failed (exit code 3)."""
