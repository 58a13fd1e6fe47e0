"""Exception hierarchy shared across the toolkit.

Two intermediate bases drive the CLI exit codes: ``ValidationError``
(bad arguments or inconsistent in-memory data, exit 1) and
``FileFormatError`` (malformed on-disk data, exit 2).
"""


class CfsError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(CfsError):
    """Invalid argument, configuration, or in-memory data."""


class FileFormatError(CfsError):
    """Malformed or inconsistent data file."""


# -- mask model ------------------------------------------------------------

class FragmentOverflow(ValidationError):
    """More fragments in one category than the bit encoding can hold."""


class ReservedBitsSet(FileFormatError):
    """Encoded mask word uses reserved bits 30 or 31."""


class BadMagic(FileFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(FileFormatError):
    """File is shorter than its header promises."""


class DimensionOverflow(ValidationError):
    """Raster dimension exceeds the 2^16 per-side file format limit."""


# -- phantom generation ----------------------------------------------------

class FragmentCountOutOfRange(ValidationError):
    """Requested fragment count outside [1, 10]."""


class DegenerateFracture(CfsError):
    """No valid fracture plane found within the resample budget."""


# -- projection ------------------------------------------------------------

class DetectorTooSmall(ValidationError):
    """Volume footprint exceeds the detector field of view."""


class EmptyReference(ValidationError):
    """Overlap ratio requested against an empty reference category."""


# -- preprocessing ---------------------------------------------------------

class TargetTooSmall(ValidationError):
    """Padding target smaller than the input along some axis."""


class InconsistentRecord(ValidationError):
    """Pad record does not fit the padded raster it is applied to."""


# -- predictions -----------------------------------------------------------

class MissingCategoryFile(FileFormatError):
    """Prediction directory lacks a per-category mask file."""


class BadManifest(FileFormatError):
    """Prediction manifest is malformed or violates a range check."""


# -- metrics ---------------------------------------------------------------

class DimensionMismatch(ValidationError):
    """Two rasters that must share dimensions do not."""


class EmptyMask(ValidationError):
    """Operation requires a nonempty mask."""


class NoRecords(ValidationError):
    """Aggregation over an empty record list."""


# -- overlap analysis ------------------------------------------------------

class LengthMismatch(ValidationError):
    """Paired series have different lengths."""


class DegenerateConstantSeries(ValidationError):
    """Rank correlation of a constant series is undefined."""


# -- pipeline --------------------------------------------------------------

class CapExceededWarning(UserWarning):
    """More than 10 fragments survived post-processing; excess dropped."""


class FovExceededWarning(UserWarning):
    """Volume projection extends beyond the detector field of view."""
