"""Exception types shared across the toolkit."""


class DataFormatError(ValueError):
    """A dataset file or record violates the expected layout."""


class EmptyDatasetError(ValueError):
    """A dataset file contains no records."""


class ShapeError(ValueError):
    """A layer configuration produces an impossible tensor shape."""


class ConfigError(ValueError):
    """A configuration value is out of its documented domain."""


class TrainingError(RuntimeError):
    """Training could not proceed (empty data, diverged loss, bad labels)."""


class NumericError(RuntimeError):
    """A forward pass produced non-finite intermediate values."""


class ContainerFormatError(ValueError):
    """A binary container is malformed; carries the offending byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset
