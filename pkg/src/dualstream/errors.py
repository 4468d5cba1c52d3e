"""Exception hierarchy shared by all modules."""


class DualStreamError(Exception):
    """Base class for all package errors."""


class ShapeError(DualStreamError):
    """Tensor/array shapes are incompatible with the requested operation."""


class DomainError(DualStreamError):
    """Input lies outside the mathematical domain of the operation."""


class NumericalError(DualStreamError):
    """A computation produced non-finite values where finiteness is required."""


class FrameError(DualStreamError):
    """Coordinate-frame mismatch or non-rigid transform."""


class FormatError(DualStreamError):
    """Malformed file, directory layout, or structured input."""


class SampleError(DualStreamError):
    """Sampling coordinates fall outside the valid image region."""


class DecodeError(DualStreamError):
    """Action decoding had no usable evidence (e.g. all grid points off-image)."""


class PipelineError(DualStreamError):
    """A pipeline command is missing an upstream artifact."""


class IoError(DualStreamError):
    """Filesystem read/write failure on a pipeline artifact."""
