"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError
(and subclasses) -> 3, NumericsError -> 4.
"""


class RevqError(Exception):
    pass


class ConfigError(RevqError):
    """Invalid configuration value or unknown config key."""


class DataFormatError(RevqError):
    """Malformed binary input: bad magic, bad version, bad header."""


class TruncationError(DataFormatError):
    """Stream ended inside a window payload."""

    def __init__(self, message, window_index):
        super().__init__(message)
        self.window_index = window_index


class IntegrityError(DataFormatError):
    """Well-formed bytes carrying inconsistent content (mask popcount, code range)."""


class NumericsError(RevqError):
    """Training produced a non-finite loss or parameter."""
