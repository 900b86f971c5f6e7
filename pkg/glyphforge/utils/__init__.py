"""Utilities module."""

from ._config import machine_info, sys_info
from ._errors import (
    BadMagicError,
    DataError,
    DivergenceError,
    DuplicateInstanceError,
    FingerprintMismatchError,
    GlyphForgeError,
    ImageTooLargeError,
    ManifestSchemaError,
    MissingImageError,
    ModelFormatError,
    NonFiniteError,
    NumericError,
    ReservedEditionError,
    ShapeError,
    ShapeMismatchError,
    TapeError,
    TruncatedDataError,
    UnknownLabelError,
    UnsupportedVersionError,
    UsageError,
    VocabularyMismatchError,
)
from ._logs import add_stream_handler, logger, set_log_level
