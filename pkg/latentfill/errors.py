"""Exception types raised by latentfill."""


class LatentFillError(Exception):
    """Base class for every error latentfill raises on purpose."""


# Files and containers
class BadMagic(LatentFillError, ValueError):
    pass


class DimensionMismatch(LatentFillError, ValueError):
    pass


class Truncated(LatentFillError, ValueError):
    pass


class ManifestMismatch(LatentFillError):
    pass


class MissingArtifact(LatentFillError):
    """A checkpoint, mask file or dataset the command needs does not exist."""


# Arrays and values
class InvalidRate(LatentFillError, ValueError):
    pass


class ShapeMismatch(LatentFillError, ValueError):
    pass


class TimeOutOfRange(LatentFillError, ValueError):
    pass


class OddDimension(LatentFillError, ValueError):
    pass


class TooFewSamples(LatentFillError, ValueError):
    pass


class NotNormalized(LatentFillError, ValueError):
    pass


class NonPSD(LatentFillError, ValueError):
    pass


# Training
class EmptyBatch(LatentFillError, ValueError):
    pass


class EmptyDataset(LatentFillError, ValueError):
    pass


class AllMissingSample(LatentFillError, ValueError):
    pass


class NonFiniteOutput(LatentFillError):
    pass


class NonFiniteLoss(LatentFillError):
    """Raised when training diverges; names the epoch it happened in."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class DegenerateLatents(LatentFillError, ValueError):
    pass


# Imputation
class MethodModelMismatch(LatentFillError, ValueError):
    pass


class NonFiniteGradient(LatentFillError):
    pass


# Experiment configuration
class ParseError(LatentFillError, ValueError):
    pass


class UnknownKey(LatentFillError, ValueError):
    pass


class InvalidValue(LatentFillError, ValueError):
    pass
