"""Exception hierarchy shared by all modules."""


class RepVSRError(Exception):
    """Base class for engine errors."""


class ShapeError(RepVSRError, ValueError):
    """Tensor extents are inconsistent with an operation's contract."""


class ContractError(RepVSRError, ValueError):
    """A structural precondition was violated (e.g. biased expand conv, double fuse)."""


class DataError(RepVSRError):
    """Malformed or missing on-disk data (clip directories, configs)."""


class TrainingDivergedError(RepVSRError, FloatingPointError):
    """Loss became non-finite during training."""


class WeightFormatError(DataError):
    """Base class for weight file decoding failures. ``code`` is stable."""

    code = "weight-format"


class BadMagicError(WeightFormatError):
    code = "bad-magic"


class UnsupportedVersionError(WeightFormatError):
    code = "bad-version"


class TruncatedFileError(WeightFormatError):
    code = "truncated"


class DimMismatchError(WeightFormatError):
    code = "dim-mismatch"


class TrailingBytesError(WeightFormatError):
    code = "trailing-bytes"
