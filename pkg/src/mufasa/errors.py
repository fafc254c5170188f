"""Exception types shared across the package."""


class MufasaError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MufasaError, ValueError):
    pass


class DimensionError(MufasaError, ValueError):
    pass


class LayerRangeError(MufasaError, IndexError):
    pass


class NumericError(MufasaError, ArithmeticError):
    pass


class FormatError(MufasaError):
    """File does not carry the expected magic bytes or version."""


class CorruptionError(MufasaError):
    """File header and payload disagree (truncated or padded payload)."""


class CompatibilityError(MufasaError):
    """Checkpoint and dataset/config do not belong together."""


class UndefinedInputError(MufasaError, ValueError):
    """A metric is undefined for the given input (e.g. no foreground)."""


class UnsupportedError(MufasaError):
    pass
