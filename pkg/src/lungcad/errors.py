"""Exception types shared across the package."""


class LungCadError(Exception):
    """Base class for package-specific failures."""


class InvalidVolumeError(LungCadError):
    """Volume geometry or payload is inconsistent."""


class SegmentationFailure(LungCadError):
    """Lung mask extraction found no plausible lung region."""


class CorruptModelError(LungCadError):
    """Model file is truncated, mislabeled, or inconsistent."""


class ModeMismatchError(LungCadError):
    """A detector model was supplied where a regressor was required (or vice versa)."""


class NumericFailure(LungCadError):
    """Non-finite values appeared during a network pass."""


class GenerationError(LungCadError):
    """Phantom generation could not satisfy its placement constraints."""
