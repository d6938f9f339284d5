"""Exception types shared across the package."""


class NavsegError(Exception):
    """Base class for all navseg errors."""


class ShapeError(NavsegError, ValueError):
    """Tensor/weight geometry violates an operation's contract."""


class FormatError(NavsegError, ValueError):
    """Malformed file content. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(NavsegError, ValueError):
    """Invalid user-supplied data (datasets, labels, images)."""


class NumericalError(NavsegError, ArithmeticError):
    """Non-finite values where finite arithmetic is required."""
