"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataFormatError -> 3, NumericalAbort -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad key, unparsable value, or violated invariant."""


class DataFormatError(ValueError):
    """Malformed feature or checkpoint file."""

    def __init__(self, message: str, *, byte_offset: int | None = None,
                 item_index: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        if item_index is not None:
            message = f"{message} (item {item_index})"
        super().__init__(message)
        self.byte_offset = byte_offset
        self.item_index = item_index


class NumericalAbort(RuntimeError):
    """Training produced NaN/degenerate values; aborted with a diagnostic dump."""


class DegenerateRowError(ValueError):
    """A row that must be normalized has (near-)zero norm."""
