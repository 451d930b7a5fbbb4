"""Exception hierarchy shared by every tslora module."""


class TsloraError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TsloraError, ValueError):
    """Invalid configuration value. ``flag`` names the offending option when known."""

    def __init__(self, message: str, flag: str | None = None):
        super().__init__(message)
        self.flag = flag


class ContractError(TsloraError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Array shapes are incompatible."""


class NumericError(TsloraError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class InjectionError(TsloraError, ValueError):
    """An adapter does not fit the matrix it is attached to."""


class RankError(ConfigError):
    """LoRA rank outside ``[1, min(d, k)]``."""


class DataError(TsloraError, ValueError):
    """Input data is unusable (empty split, all-missing series, ...)."""


class EmptySeriesError(DataError):
    """Every value of a series is missing."""


class ScalingError(DataError):
    """Min-max scaling is undefined because the pool is constant."""


class SplitError(DataError):
    """Not enough samples or groups to build the requested split."""


class FormatError(TsloraError, ValueError):
    """A checkpoint/adapter/dataset file is malformed."""
