"""Exception types raised by the library."""


class InputError(ValueError):
    """Malformed input: shapes, ranges, files."""


class NumericError(ArithmeticError):
    """A numerical procedure failed (factorization, divergence, rank loss)."""
