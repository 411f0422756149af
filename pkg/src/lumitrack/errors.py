"""Exception hierarchy.  Each family maps onto one CLI exit code."""


class LumitrackError(Exception):
    exit_code = 1


class InputError(LumitrackError, ValueError):
    """Malformed input, invalid configuration or shape mismatch."""
    exit_code = 2


class CoverageError(LumitrackError):
    """Data does not cover the span an operation needs."""
    exit_code = 3


class NumericalError(LumitrackError, ArithmeticError):
    """Non-finite values or divergence."""
    exit_code = 4
