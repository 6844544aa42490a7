"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AsmalignError(Exception):
    """Base class for every error raised by this package."""


class ListingParseError(AsmalignError):
    """A disassembly listing line could not be interpreted."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class IntegrityError(AsmalignError):
    """A structural invariant of a record was violated."""


class SchemaError(AsmalignError):
    """An artifact file has an unknown or incompatible schema."""


class BackendError(AsmalignError):
    """A chat or embedding backend failed after bounded retries."""


class ReplayMissError(BackendError):
    """Replay mode was asked for a request that was never recorded."""
