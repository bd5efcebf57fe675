"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, TransportError -> 3,
DataError (and subclasses) -> 4.
"""


class SeraugError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SeraugError):
    """Invalid or incomplete configuration (bad keys, missing API key env var)."""


class TransportError(SeraugError):
    """A remote call failed after exhausting retries."""

    def __init__(self, message: str, last_status: int | None = None):
        super().__init__(message)
        self.last_status = last_status


class DataError(SeraugError):
    """Input data failed validation (manifest, splits, shapes, counts)."""


class FormatError(DataError):
    """A binary feature file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class NumericsError(SeraugError):
    """A non-finite value surfaced during optimization."""
