class ShapeError(ValueError):
    """Raised when tensor, block or factor dimensions do not agree."""


class NumericError(ArithmeticError):
    """Raised when a sampler step meets a non-finite quantity."""
