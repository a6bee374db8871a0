"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class FormatError(ValueError):
    """A packed tensor or checkpoint file is malformed."""


class UnsupportedVersionError(FormatError):
    """A checkpoint was written with a format version this reader does not know."""


class ConfigurationError(ValueError):
    """Invalid configuration or run parameters."""
