"""Exception hierarchy shared by every module of the lab."""

from typing import Optional


class LabError(Exception):
    """Base class for all errors raised on purpose by retention_lab."""


class DimensionError(LabError, ValueError):
    """A vector or tensor does not have the shape an operation requires."""


class UsageError(LabError, RuntimeError):
    """An API was called out of order (e.g. backprop with a stale cache)."""


class NonFiniteError(LabError, FloatingPointError):
    """A NaN or infinity showed up in a gradient, loss or intermediate value."""

    def __init__(
        self,
        message: str,
        name: Optional[str] = None,
        step: Optional[int] = None,
        index: Optional[int] = None,
    ) -> None:
        super().__init__(message)
        self.name = name
        self.step = step
        self.index = index


class ConfigError(LabError, ValueError):
    """Invalid configuration value or combination of values."""


class ConfigParseError(ConfigError):
    """A configuration file line could not be parsed."""

    def __init__(self, message: str, line_number: int) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class CheckpointError(LabError, ValueError):
    """A checkpoint file is unreadable or does not match the configuration."""


class NotReadyError(LabError):
    """Not enough data yet (replay buffer under-filled, empty metric window)."""


class FormatError(LabError, ValueError):
    """An input file does not follow the expected format."""


class DegenerateRateError(FormatError):
    """A behavior's empirical rate is 0 or 1, so its logit is undefined."""

    def __init__(self, behavior: str, rate: float) -> None:
        super().__init__(f"behavior '{behavior}' has degenerate positive rate {rate}")
        self.behavior = behavior
        self.rate = rate
