"""Exception hierarchy shared across the package."""


class FemsegError(Exception):
    """Base class for all errors raised by femseg."""


# volgrid
class OutOfBounds(FemsegError):
    pass


class GeometryMismatch(FemsegError):
    pass


class MalformedHeader(FemsegError):
    pass


class SizeMismatch(FemsegError):
    pass


class UnsupportedEncoding(FemsegError):
    pass


# phantom
class SpecOutOfBounds(FemsegError):
    pass


# nn
class ShapeMismatch(FemsegError):
    pass


class OddDimension(FemsegError):
    pass


class IndivisibleDims(FemsegError):
    pass


class MalformedCheckpoint(FemsegError):
    pass


class VersionMismatch(FemsegError):
    pass


# inference
class DegenerateHistogram(FemsegError):
    pass


# metrics / regions
class UndefinedMetric(FemsegError):
    """A metric whose denominator vanishes; reported as undefined, never as a number."""


class BothEmpty(UndefinedMetric):
    pass


class EmptyDenominator(UndefinedMetric):
    pass


class EmptyMask(FemsegError):
    pass


class EmptySurface(FemsegError):
    pass


class ZeroGroundTruth(FemsegError):
    pass


class DegenerateGeometry(FemsegError):
    pass


# experiment harness
class TooFewSubjects(FemsegError):
    pass


class DataMissing(FemsegError):
    pass


class NoFolds(FemsegError):
    pass


class NumericFailure(FemsegError):
    """Raised when training produces non-finite values."""
