"""Exception taxonomy shared by all imix modules."""


class ImixError(Exception):
    """Base class for all library errors."""


class ShapeError(ImixError, ValueError):
    """Array arguments have incompatible or invalid shapes."""


class ConfigError(ImixError, ValueError):
    """A configuration value is out of range or inconsistent."""


class NumericError(ImixError, ArithmeticError):
    """A numeric precondition failed (zero norms, non-PSD input, NaN loss)."""


class LabelError(ImixError, ValueError):
    """Label or virtual-label weights violate their contract."""


class DataError(ImixError, ValueError):
    """Dataset ingestion failed (ragged rows, bad cells, missing columns)."""


class UsageError(ImixError, RuntimeError):
    """API misuse: stale caches, missing heads, uninitialized state."""
