"""Exception hierarchy.

Every error raised on purpose by glyphforge derives from
:class:`GlyphForgeError` and carries the process exit code the command line
interface reports for it.
"""


class GlyphForgeError(Exception):
    """Base class of all glyphforge errors."""

    exit_code = 1


class UsageError(GlyphForgeError, ValueError):
    """Invalid flags, hyperparameters or architecture."""

    exit_code = 1


class ShapeError(UsageError):
    """A tensor does not have the shape an operation requires."""


class TapeError(GlyphForgeError, RuntimeError):
    """A recorded forward pass was replayed twice."""


class DataError(GlyphForgeError):
    """Problems with a manifest, an image or a model file."""

    exit_code = 2


class ManifestSchemaError(DataError):
    """The manifest does not follow the documented schema."""


class MissingImageError(DataError):
    """An image referenced by the manifest does not exist."""


class UnknownLabelError(DataError):
    """A label is not part of the closed class vocabulary."""


class DuplicateInstanceError(DataError):
    """Two manifest instances share an id."""


class ImageTooLargeError(DataError):
    """An image exceeds the accepted side length."""


class ReservedEditionError(DataError):
    """An instance uses an edition id reserved for another purpose."""


class VocabularyMismatchError(DataError):
    """A model's label vocabulary does not cover the evaluated data."""


class ModelFormatError(DataError):
    """A serialized model or index cannot be decoded."""


class BadMagicError(ModelFormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(ModelFormatError):
    """The file format version is not supported."""


class TruncatedDataError(ModelFormatError):
    """The file ends before all declared tensor data was read."""


class ShapeMismatchError(ModelFormatError):
    """A stored tensor does not match the shape implied by its header."""


class FingerprintMismatchError(DataError):
    """A model does not match the one a feature index was built with."""


class NumericError(GlyphForgeError, ArithmeticError):
    """Numerical failure."""

    exit_code = 3


class NonFiniteError(NumericError):
    """NaN or infinite values where finite ones are required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""
