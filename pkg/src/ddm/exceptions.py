"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class DomainError(ValueError):
    """A value lies outside the domain an operation accepts."""


class UsageError(RuntimeError):
    """An API was called in a state or combination it does not support."""


class ArchiveFormatError(ValueError):
    """A tensor archive is malformed or truncated."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""
