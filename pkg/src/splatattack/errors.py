"""Exception types raised across the package."""


class SplatAttackError(Exception):
    """Base class for all package errors."""


class MalformedAsset(SplatAttackError):
    """An asset file is missing, unreadable, or lacks required properties."""


class ValueDomain(SplatAttackError, ValueError):
    """A parameter lies outside its admissible domain."""


class ShapeMismatch(SplatAttackError, ValueError):
    """Two inputs that must align have different shapes."""


class DegenerateCamera(SplatAttackError, ValueError):
    """A view cannot define a valid pinhole projection."""


class AdapterFailure(SplatAttackError, RuntimeError):
    """A task model could not be reached or returned unusable output."""


class BadRatio(SplatAttackError, ValueError):
    """A shrink ratio outside (0, 1]."""


class NonFiniteLoss(SplatAttackError, FloatingPointError):
    """The objective or its gradient became NaN/Inf during an attack step."""


class EmptyMask(SplatAttackError, ValueError):
    """A metric that averages over a mask was given an empty mask."""


class NoGroundTruth(SplatAttackError, ValueError):
    """mAP was requested without any ground-truth box of a target class."""
