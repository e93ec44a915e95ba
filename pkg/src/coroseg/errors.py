"""Exception hierarchy shared by all coroseg modules.

Everything raised on bad *data* derives from :class:`DataError` so the CLI can
map it to exit status 2; configuration mistakes derive from :class:`ConfigError`.
"""


class CorosegError(Exception):
    """Base class for all package errors."""


class DataError(CorosegError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class ReferentialError(DataError):
    pass


class DomainError(DataError, ValueError):
    pass


class UnsupportedFormatError(DataError):
    pass


class DegeneratePolygonError(DataError, ValueError):
    pass


class LookupFailure(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(DataError):
    pass


class UnsupportedDepthError(FormatError):
    pass


class SizeMismatchError(DataError):
    def __init__(self, message, expected=None, actual=None):
        if expected is not None:
            message = f"{message}: expected {expected} bytes, got {actual}"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class CorruptionError(SizeMismatchError):
    pass


class ValidityError(DataError, ValueError):
    pass


class DimensionError(DataError, ValueError):
    pass


class ConfigError(CorosegError, ValueError):
    pass


class SequencingError(DataError):
    pass


class EmptyPopulationError(DataError, ValueError):
    pass


class TrainingDiagnosticsError(CorosegError, FloatingPointError):
    pass
