"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericError -> 3, DataError/CorruptDataError -> 4.
"""


class SkgeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SkgeError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(SkgeError):
    """A caller violated an operation's precondition."""


class ConfigError(SkgeError):
    """Invalid configuration: bad key, bad value, or indivisible geometry."""


class NumericError(SkgeError):
    """A computation produced NaN/Inf or is otherwise numerically invalid."""


class DataError(SkgeError):
    """A data record violates the sample invariants."""


class CorruptDataError(DataError):
    """A stored dataset or checkpoint file is truncated or inconsistent."""
