"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, InputError and
DataError -> 3, NumericError -> 4.
"""


class InputError(ValueError):
    """An operation received arguments that violate its preconditions."""


class UsageError(RuntimeError):
    """An operation was invoked on an object in the wrong state (e.g. a frozen model)."""


class ConfigError(ValueError):
    """A run configuration is malformed or internally inconsistent."""


class DataError(ValueError):
    """A data artifact (dataset, telemetry, checkpoint) is missing or malformed."""


class NumericError(ArithmeticError):
    """Training produced a non-finite quantity."""
