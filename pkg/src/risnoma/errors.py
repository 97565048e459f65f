"""Exception types raised across the package."""


class RisNomaError(Exception):
    """Base class for all package errors."""


class NonFiniteValue(RisNomaError, FloatingPointError):
    """A tape node evaluated to NaN or +/-inf."""


class SingularMatrix(RisNomaError, ArithmeticError):
    """A pivot fell below the elimination threshold."""


class InvalidConfig(RisNomaError, ValueError):
    pass


class InvalidDistance(RisNomaError, ValueError):
    pass


class OddUserCount(RisNomaError, ValueError):
    pass


class TooLarge(RisNomaError, ValueError):
    pass


class ModelIOError(RisNomaError, OSError):
    """Model file could not be read, or its checksum does not match."""


class FormatVersionMismatch(RisNomaError, ValueError):
    pass


class DimensionMismatch(RisNomaError, ValueError):
    pass


class ParseError(RisNomaError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownKey(ParseError):
    pass
