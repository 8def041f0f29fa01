"""Exception types raised across the package.

Every reader/validator failure maps to exactly one of these so callers
(and the CLI exit-code table) can dispatch on type instead of message text.
"""


class MaskPickError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MaskPickError):
    """Two rasters or masks that must share dimensions do not."""


class RunSumMismatch(MaskPickError):
    """RLE runs do not sum to width x height."""


class ParseError(MaskPickError):
    """A file is structurally malformed.

    Carries the offending path and, where known, a byte or line offset.
    """

    def __init__(self, message, path=None, offset=None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if offset is not None:
            detail = f"{detail} (offset {offset})"
        super().__init__(detail)
        self.path = path
        self.offset = offset


class BadMagic(ParseError):
    """A binary file does not start with the expected magic bytes."""


class TruncatedFile(ParseError):
    """A binary file ends before its declared payload."""


class ValueOutOfRange(ParseError):
    """A stored value violates its documented range (e.g. probability > 1)."""


class DuplicateId(ParseError):
    """Two candidates or objects in one frame share an id."""


class MissingFlow(MaskPickError):
    """A non-final frame has no flow field to the next frame."""


class IndexOutOfRange(MaskPickError):
    """A frame or transition index is outside the scene."""


class TooManyCandidates(MaskPickError):
    """A frame exceeds the configured candidate cap."""


class EmptyShortlist(MaskPickError):
    """A trellis layer has no combinations."""


class InstanceTooLarge(MaskPickError):
    """The exact oracle guard (N <= 14, T <= 12) was violated."""


class ConfigInvalid(MaskPickError):
    """A synthetic-scene configuration cannot be realized."""


class OutputExistsError(MaskPickError):
    """The emit target directory already exists and is not empty."""
