"""Exception types raised across the package."""


class SliceSplatError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SliceSplatError, ValueError):
    pass


class DegenerateCovarianceError(SliceSplatError, ArithmeticError):
    pass


class NumericFailureError(SliceSplatError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class CorruptContainerError(SliceSplatError, ValueError):
    pass


class VolumeLoadError(SliceSplatError, OSError):
    pass
