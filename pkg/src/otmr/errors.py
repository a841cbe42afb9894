"""Exception hierarchy shared by every module."""


class OTMRError(Exception):
    """Base class for all package errors."""


class ValidationError(OTMRError, ValueError):
    """Bad argument values, shapes, or non-finite inputs."""


class FormatError(OTMRError):
    """A file does not follow the expected on-disk layout."""


class UnsupportedVersionError(FormatError):
    pass


class StorageError(OTMRError, OSError):
    """Reading or writing a file failed at the OS level."""


class CapacityError(OTMRError):
    """Problem size exceeds what an exact solver is allowed to take."""


class ConvergenceError(OTMRError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericError(OTMRError, FloatingPointError):
    """NaN/inf or runaway values during a forward pass or training."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
