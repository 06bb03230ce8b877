"""Exception hierarchy shared by all subpackages."""


class OcdcError(Exception):
    """Base class for every error raised by this package."""


class PhaseOutOfRange(OcdcError, ValueError):
    pass


class EncodingOutOfRange(OcdcError, ValueError):
    pass


class EmptyInput(OcdcError, ValueError):
    pass


class NegativeIntensity(OcdcError, ValueError):
    pass


class BranchIndexError(OcdcError, IndexError):
    """Raised for a branch index outside the chip (``IndexOutOfRange``)."""


class FitDiverged(OcdcError, RuntimeError):
    pass


class NoMinimumFound(OcdcError, RuntimeError):
    pass


class Diverged(OcdcError, RuntimeError):
    pass


class DimensionMismatch(OcdcError, ValueError):
    pass


class InvalidGeometry(OcdcError, ValueError):
    pass


class ChunkWidthExceedsChip(OcdcError, ValueError):
    pass


class ShapeMismatch(OcdcError, ValueError):
    pass


class NonFiniteLoss(OcdcError, FloatingPointError):
    pass


class SparsityUnreachable(OcdcError, RuntimeError):
    pass


class ConfigError(OcdcError, ValueError):
    """Invalid experiment or chip configuration; carries the source location."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class FormatError(OcdcError, ValueError):
    """Malformed binary schedule, checkpoint or tensor file."""
