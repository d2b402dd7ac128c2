"""Exception types shared across the package."""


class MiniCnnError(Exception):
    """Base class for all errors raised by minicnn."""


class ShapeError(MiniCnnError, ValueError):
    pass


class UnknownOpError(MiniCnnError, KeyError):
    pass


class NonScalarLossError(MiniCnnError, ValueError):
    pass


class BudgetExceededError(MiniCnnError, ValueError):
    pass


class SpecError(MiniCnnError, ValueError):
    """Problem in an architecture description.

    ``line`` is the 1-based line number in the source text when the error
    came from the parser, ``node`` the offending node id when known.
    """

    def __init__(self, message, line=None, node=None):
        self.line = line
        self.node = node
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(MiniCnnError, RuntimeError):
    pass


class FoldInfeasibleError(MiniCnnError, ValueError):
    pass


class ConfigError(MiniCnnError, ValueError):
    pass


class FormatError(MiniCnnError, ValueError):
    """Malformed or unsupported file content."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class HashMismatchError(FormatError):
    pass


class DataError(MiniCnnError, OSError):
    """A dataset or checkpoint path that cannot be read."""
