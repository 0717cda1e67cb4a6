"""Exception hierarchy shared by all modules."""


class CmfdError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(CmfdError, ValueError):
    """An argument is outside its documented range or has the wrong shape."""


class DomainError(CmfdError, ValueError):
    """The input is well formed but the operation is undefined on it."""


class ConfigurationError(CmfdError, ValueError):
    """An experiment configuration is inconsistent."""


class ProtocolError(CmfdError, RuntimeError):
    """A device did not receive what the synchronous schedule promised."""


class NumericError(CmfdError, ArithmeticError):
    """Iterates stopped being finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class IdxFormatError(CmfdError, ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
