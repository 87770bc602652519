"""Exception types raised across the package."""


class BloomJoinError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(BloomJoinError, ValueError):
    pass


class IncompatibleFilterError(BloomJoinError, ValueError):
    """Two filters with different hashing parameters cannot be merged."""


class DeserializationError(BloomJoinError, ValueError):
    pass


class SchemaError(BloomJoinError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class CsvParseError(BloomJoinError, ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class CapacityError(BloomJoinError, RuntimeError):
    """The small side does not fit the broadcast memory cap; use the cascade join."""


class DomainError(BloomJoinError, ValueError):
    """A model was evaluated outside the region where it is defined."""


class UnderdeterminedError(BloomJoinError, ValueError):
    """Not enough distinct observations to fit a model."""
