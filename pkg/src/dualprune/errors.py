"""Exception hierarchy shared by every dualprune module."""


class DualPruneError(Exception):
    """Base class for all library errors."""


class ConfigError(DualPruneError, ValueError):
    """Invalid configuration, flags, or precondition on sizes/budgets."""


class DataError(DualPruneError, ValueError):
    """Input data is malformed or numerically unusable."""


class FormatError(DataError):
    """A file does not follow the expected binary/JSON layout."""


class UnsupportedError(DataError):
    """A well-formed file uses a feature this library does not read."""


class ConsistencyError(DataError):
    """Tensors that must agree on a dimension do not."""


class NumericRangeError(DataError, ArithmeticError):
    """A log-space quantity is too large to exponentiate in float64."""


class DegenerateInputError(DataError):
    """The requested quantity is undefined for this input (e.g. zero norm)."""


class BatchIOError(DualPruneError, OSError):
    """Filesystem failure, always carrying the offending path."""
