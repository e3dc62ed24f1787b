"""Exception types shared across the package."""


class ColanetError(Exception):
    """Base class for all package errors."""


class ShapeError(ColanetError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ColanetError, ValueError):
    """A configuration value is out of range or inconsistent."""


class GraphError(ColanetError, RuntimeError):
    """The autodiff tape was used outside its contract."""


class NumericError(ColanetError, ArithmeticError):
    """A computation produced non-finite values."""


class DegenerateStatisticsError(NumericError):
    """Batch statistics requested over an empty extent."""


class FormatError(ColanetError, ValueError):
    """A serialized artifact (image, checkpoint, config) is malformed."""


class UnsupportedVersionError(FormatError):
    """A serialized artifact has a version this build cannot read."""


class CorruptFileError(FormatError):
    """A serialized artifact is truncated or fails its integrity check."""
