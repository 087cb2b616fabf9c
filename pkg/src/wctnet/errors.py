"""Exception hierarchy shared by every wctnet module."""


class WctError(Exception):
    """Base class for all errors raised by wctnet."""


class FormatError(WctError):
    """A file does not follow its documented layout."""


class DataError(WctError):
    """Input values are unusable (non-finite, degenerate, empty)."""


class ShapeError(WctError):
    """Array dimensions disagree with what an operation requires."""


class ConfigError(WctError):
    """A configuration value is out of its valid range."""


class IoError(WctError, OSError):
    """Reading or writing a file failed."""


class NumericError(WctError):
    """An operation produced NaN or Inf."""


class StateError(WctError):
    """An object was used in the wrong order (e.g. backward before forward)."""
