"""Exception hierarchy shared by every module.

Library code raises these; only the CLI maps them to exit codes.
"""
from typing import Optional


class LabError(Exception):
    """Base class for all lab failures."""

    exit_code = 1


class ConfigurationError(LabError):
    """Invalid configuration or mismatched shapes/partitions."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class InvalidArgumentError(LabError, ValueError):
    """An argument is outside the operation's domain."""


class PreconditionError(InvalidArgumentError):
    """A theorem or lemma precondition does not hold."""


class UnsupportedOperationError(LabError):
    """The objective family cannot provide the requested oracle."""


class DatasetFormatError(LabError):
    """Malformed dataset file."""

    def __init__(self, message: str, offset: Optional[int] = None, line: Optional[int] = None):
        super().__init__(message)
        self.offset = offset
        self.line = line


class NumericalOverflowError(LabError):
    """A loss, gradient or weight became non-finite."""

    exit_code = 2

    def __init__(self, message: str, group: Optional[str] = None):
        super().__init__(message)
        self.group = group


class DomainViolationError(LabError):
    """A theory trajectory left the ball on which G is valid."""

    exit_code = 2


class RecordIOError(LabError):
    """Reading or writing a run artifact failed."""

    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path
