"""Exception types raised by freeze-guard.

All library errors derive from FreezeGuardError and, where a builtin
category fits, also from that builtin so callers can catch either.
"""


class FreezeGuardError(Exception):
    """Base class for all freeze-guard errors."""


class ConfigError(FreezeGuardError, ValueError):
    """Invalid configuration value or parameter range."""


class CongruenceError(FreezeGuardError, ValueError):
    """Two parameter sets differ in names, order or shapes."""


class DimensionError(FreezeGuardError, ValueError):
    """Shape or length mismatch."""


class IndexRangeError(FreezeGuardError, IndexError):
    """Tensor index, diffusion step or class label out of range."""


class CheckpointError(FreezeGuardError):
    """Checkpoint file could not be decoded."""


class CheckpointFormatError(CheckpointError):
    """Checkpoint magic bytes or field values are invalid."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint was written with an unknown format version."""


class TruncatedCheckpointError(CheckpointError):
    """Checkpoint payload ends before the declared content."""


class NumericalError(FreezeGuardError, ArithmeticError):
    """A loss or parameter became NaN or infinite."""


class MissingArtifactError(FreezeGuardError, FileNotFoundError):
    """A pipeline stage needs an artifact that has not been produced yet."""


class GradientCheckError(FreezeGuardError):
    """Analytic and finite-difference gradients disagree."""
