"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class ZonesegError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class UsageError(ZonesegError, ValueError):
    """The caller asked for something the API does not support."""

    exit_code = 1


class ConfigError(ZonesegError, ValueError):
    """A configuration value violates its documented constraints."""

    exit_code = 1


class ShapeError(ZonesegError, ValueError):
    """Tensor or volume extents are incompatible with the requested op."""


class DataError(ZonesegError, ValueError):
    """Input data holds values outside the allowed domain."""


class FormatError(ZonesegError):
    """A container file is malformed.

    Attributes:
        offset: Byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
