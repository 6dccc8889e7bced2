"""Exception types shared across the package."""

__all__ = ["DataError", "NumericalError"]


class DataError(ValueError):
    """Malformed or inconsistent input data (files, records, mappings)."""


class NumericalError(RuntimeError):
    """Non-finite values where finite numbers are required."""
