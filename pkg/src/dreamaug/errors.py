"""Exception hierarchy shared by the library and the CLI.

Each class maps onto one CLI exit code (see ``dreamaug.cli``).
"""


class DreamAugError(Exception):
    """Base class for all library errors."""


class DimensionError(DreamAugError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(DreamAugError, ValueError):
    """Invalid configuration value or architecture."""


class DataError(DreamAugError, ValueError):
    """Dataset contents violate a precondition (e.g. an empty class)."""


class FormatError(DreamAugError, IOError):
    """A file could not be parsed (checkpoint, PPM, manifest)."""


class NumericError(DreamAugError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(DreamAugError, RuntimeError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""
