"""Exception hierarchy shared across the package."""


class DeltaZipError(Exception):
    """Base class for all library errors."""


class ShapeError(DeltaZipError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class EncodingError(DeltaZipError, ValueError):
    """A value cannot be represented in the requested packed encoding."""


class NumericDomainError(DeltaZipError, ArithmeticError):
    """A numerical precondition failed (e.g. Hessian not positive definite)."""


class CalibrationError(DeltaZipError, ValueError):
    """Calibration data is unusable (wrong dimension, all zeros, ...)."""


class FormatError(DeltaZipError, ValueError):
    """A container file is malformed. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PartitionError(DeltaZipError, ValueError):
    """A tensor-parallel partition request is invalid."""


class TraceError(DeltaZipError, ValueError):
    """A workload trace is malformed or references unknown models."""


class UnknownDeltaError(DeltaZipError, KeyError):
    """A batch row references a delta id that is not available."""
