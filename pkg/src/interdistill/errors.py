"""Exception hierarchy shared across the package."""


class InterDistillError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(InterDistillError, ValueError):
    pass


class EmptyInputError(InvalidArgumentError):
    pass


class ParseError(InterDistillError):
    """A record or file could not be parsed.

    ``line`` is the 1-based line number when the failure came from a
    line-oriented file.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(InterDistillError):
    """Inputs are individually valid but inconsistent with each other."""


class CheckpointError(InterDistillError):
    pass


class FormatError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError):
    pass


class UnparseableResponseError(InterDistillError):
    pass


class TeacherError(InterDistillError):
    pass


class TransportError(TeacherError):
    pass


class EndpointError(TeacherError):
    def __init__(self, status, message=""):
        super().__init__(f"endpoint returned HTTP {status}: {message}".rstrip(": "))
        self.status = status
