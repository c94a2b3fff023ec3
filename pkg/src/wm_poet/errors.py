"""Exception types shared across the package.

Every error raised on a documented failure path derives from WmPoetError so
the CLI can turn any of them into a one-line machine-parseable exit.
"""


class WmPoetError(Exception):
    """Base class for all package errors."""


class DimensionError(WmPoetError):
    """Tensor shapes do not conform for the requested operation."""


class NumericError(WmPoetError):
    """NaN/Inf entered the computation, or a loss became non-finite."""


class ContractError(WmPoetError):
    """A caller violated an API precondition (e.g. non-scalar loss)."""


class ConfigError(WmPoetError):
    """Invalid configuration value or unknown configuration key."""


class DataError(WmPoetError):
    """Malformed or inconsistent input data."""


class CheckpointError(WmPoetError):
    """Checkpoint version/shape mismatch or corrupted blob."""


class ConstraintInfeasibleError(WmPoetError):
    """A hard phonology constraint eliminated every candidate character."""

    def __init__(self, message: str, line_index: int | None = None, position: int | None = None):
        super().__init__(message)
        self.line_index = line_index
        self.position = position
