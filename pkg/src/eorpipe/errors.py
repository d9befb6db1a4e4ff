"""Exception taxonomy shared across the package.

Every error raised on bad input derives from ``InputError`` and every
error raised mid-computation derives from ``ProcessingError``; the CLI
maps the former to exit code 2 and unexpected failures to exit code 1.
"""

from __future__ import annotations


class EorPipeError(Exception):
    """Base class for all package errors."""


class InputError(EorPipeError):
    """Malformed or unusable input (file, header, manifest, argument)."""


class ProcessingError(EorPipeError):
    """A computation could not proceed on otherwise well-formed input."""


# --- volume I/O -------------------------------------------------------------

class BadMagic(InputError):
    """Not a NIfTI-1 payload (magic bytes wrong)."""


class UnsupportedDatatype(InputError):
    def __init__(self, code: int):
        super().__init__(f"unsupported NIfTI datatype code {code}")
        self.code = code


class TruncatedData(InputError):
    """Payload shorter than the header-declared voxel block."""


class HeaderInconsistent(InputError):
    """Header fields contradict each other or the supported shapes."""


class NonIntegerLabels(InputError):
    """Label volume decodes to values that are not integral."""


class LabelOutOfRange(InputError):
    def __init__(self, found):
        super().__init__(f"label value {found} outside the 0..3 range")
        self.found = found


class LossyConversion(InputError):
    """Writing would silently change voxel values."""


# --- geometry ---------------------------------------------------------------

class SingularTransform(ProcessingError):
    """Affine matrix is not invertible."""


class GeometryMismatch(InputError):
    """Volumes expected on the same grid differ in dims or spacing."""


# --- preprocessing ----------------------------------------------------------

class ConstantImage(ProcessingError):
    """An image with zero intensity variance cannot drive this step."""


class EmptyMask(ProcessingError):
    """A brain mask with no foreground voxels."""


class DegenerateMask(ProcessingError):
    """Mask has foreground but the masked intensities are constant."""


class MissingReferenceSequence(InputError):
    """The pipeline needs a contrast-enhanced T1 volume and none was given."""


# --- metrics / classification ----------------------------------------------

class NegativeVolume(InputError):
    """A volume in cm^3 below zero makes no sense."""


class EmptyInput(InputError):
    """An empty list where at least one value is required."""


# --- cohort -----------------------------------------------------------------

class UnmappedLabel(InputError):
    def __init__(self, label: int, model: str = ""):
        where = f" for model '{model}'" if model else ""
        super().__init__(f"label {label} present but not mapped{where}")
        self.label = label


class TooFewCases(InputError):
    """Cohort statistics need at least one usable case."""


class InvalidSpec(InputError):
    """Phantom or config specification fails validation."""


class NotNormalized(InputError):
    """Segmenter input does not look z-scored (masked mean far from 0)."""
