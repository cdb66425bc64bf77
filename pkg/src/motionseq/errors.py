"""Exception types shared across the package."""


class MotionSeqError(Exception):
    """Base class."""


class ValidationError(MotionSeqError, ValueError):
    """Input violates a documented precondition."""


class FormatError(MotionSeqError, ValueError):
    """A file does not follow its binary or text layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalAbort(MotionSeqError, FloatingPointError):
    """Training produced a non-finite value."""
