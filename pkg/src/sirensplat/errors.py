"""Exception types raised by the library.

Everything recoverable derives from SplatError so callers can catch one base
class at the CLI boundary and turn it into a clean exit code.
"""


class SplatError(Exception):
    """Base class for all library errors."""


class DegenerateScaleError(SplatError):
    """A splat axis length collapsed below the representable floor."""


class NoIntersectionError(SplatError):
    """Ray is parallel to the splat plane or hits it behind the near clip."""


class ShapeMismatchError(SplatError):
    """Two arrays that must agree in shape do not."""


class LengthMismatchError(SplatError):
    """A flat parameter vector has the wrong number of entries."""


class DimensionMismatchError(SplatError):
    """An input has the wrong dimensionality for the requested head."""


class MissingFileError(SplatError):
    """A dataset or checkpoint file that must exist does not."""


class MalformedInputError(SplatError):
    """A dataset descriptor or config file failed to parse."""


class CorruptHeaderError(SplatError):
    """A checkpoint or image file header is truncated or not ours."""


class PropertyCountMismatchError(SplatError):
    """Checkpoint vertex properties do not match the declared head layout."""


class VersionMismatchError(SplatError):
    """Checkpoint was written by an incompatible format version."""


class EmptySceneError(SplatError):
    """An operation that needs at least one primitive got none."""


class TooSmallError(SplatError):
    """An image or window is too small for the requested operation."""


class NanLossError(SplatError):
    """Training loss became non-finite; diagnostics were dumped."""
