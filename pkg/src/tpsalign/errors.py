"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, I/O problems
exit 2, numerical failures exit 3.
"""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's preconditions."""


class DegenerateGridError(InvalidArgumentError):
    """Control points are duplicated or otherwise unusable."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""


class ImageIOError(OSError):
    """An image could not be read or written."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")
