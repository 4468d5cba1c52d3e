"""Dual-stream manipulation policy pipeline on a minimal autodiff core."""

from . import camgeo, cli, losses, numcore, policy, render, supervise  # noqa: F401
from .errors import (DecodeError, DomainError, DualStreamError, FormatError,
                     FrameError, IoError, NumericalError, PipelineError,
                     SampleError, ShapeError)  # noqa: F401

__version__ = "0.1.0"
