"""Exception types shared across the package."""


class TeiError(Exception):
    """Base class for all package errors."""


class ShapeError(TeiError, ValueError):
    pass


class ContractError(TeiError, ValueError):
    """A precondition on arguments or configuration was violated."""


class FormatError(TeiError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalDivergence(TeiError, ArithmeticError):
    """Training produced a non-finite loss."""
