"""Exception types shared across the package.

CLI exit codes: ConfigError maps to 2, DataError to 3.
"""


class TaplearnError(Exception):
    """Base class for all package errors."""


class ValidationError(TaplearnError):
    """An input value violates a documented precondition."""


class ConfigError(TaplearnError):
    """A configuration object violates its invariants."""


class DataError(TaplearnError):
    """An input file or stream is malformed or inconsistent."""
