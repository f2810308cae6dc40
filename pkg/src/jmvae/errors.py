"""Exception hierarchy shared by every module."""


class JMVAEError(Exception):
    """Base class for all package errors."""


class ShapeError(JMVAEError, ValueError):
    pass


class NumericsError(JMVAEError, ArithmeticError):
    """A NaN or infinity appeared where a finite value is required."""

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class SupportError(JMVAEError, ValueError):
    """A value lies outside the support of a distribution."""


class ParseError(JMVAEError, ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnsupportedLayer(JMVAEError, ValueError):
    pass


class UnsupportedOperation(JMVAEError, TypeError):
    pass


class ConfigError(JMVAEError, ValueError):
    pass


class FormatError(JMVAEError, ValueError):
    """Malformed binary container; ``offset`` is the byte where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class RangeError(JMVAEError, ValueError):
    pass


class InputError(JMVAEError, ValueError):
    pass
