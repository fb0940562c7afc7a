"""
Domain errors.

Validation problems are ValueError subclasses so callers that only expect
ValueError keep working; I/O and numeric failures get their own bases.
"""

from typing import Optional


class TensorFormatError(ValueError):
    """A tensor file does not follow the GLTENSR1 layout."""


class BadMagicError(TensorFormatError):
    pass


class HeaderError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ShapeSizeMismatchError(TensorFormatError):
    pass


class TensorFileIOError(OSError):
    """Reading or writing a tensor file failed; ``path`` names the file."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{message}: {path}")
        self.path = path


class DuplicateRecordError(ValueError):
    pass


class NoGuidableClassesError(ValueError):
    def __init__(self, message: str = "no guidable classes"):
        super().__init__(message)


class NoMatchedSlotsError(ValueError):
    def __init__(self, message: str = "no matched slots"):
        super().__init__(message)


class BackendMismatchError(ValueError):
    pass


class NumericalFailureError(RuntimeError):
    """Loss became NaN or infinite; training stopped."""

    def __init__(self, step: int, last_checkpoint: Optional[str], message: str = "non-finite loss"):
        where = last_checkpoint or "none saved yet"
        super().__init__(f"{message} at step {step} (last good checkpoint: {where})")
        self.step = step
        self.last_checkpoint = last_checkpoint


__all__ = [
    "TensorFormatError",
    "BadMagicError",
    "HeaderError",
    "TruncatedPayloadError",
    "ShapeSizeMismatchError",
    "TensorFileIOError",
    "DuplicateRecordError",
    "NoGuidableClassesError",
    "NoMatchedSlotsError",
    "BackendMismatchError",
    "NumericalFailureError",
]
