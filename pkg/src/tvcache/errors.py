"""Exception types shared across the cache, sandbox, and server layers."""

from __future__ import annotations


class TvcError(Exception):
    """Base class for all package errors."""


class MissingPrefixError(TvcError):
    """Insert/attach requires every step but the last to already exist."""


class UnknownLeaseError(TvcError):
    """Lease id was never minted or has already been consumed."""


class LeaseExpiredError(TvcError):
    """Lease outlived its TTL; the refcount was reclaimed."""


class CorruptGraphFileError(TvcError):
    """Persisted graph file is damaged. Carries the byte offset of the damage."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionMismatchError(TvcError):
    """Persisted graph file was written by an incompatible format version."""


class UnknownSnapshotError(TvcError):
    """Snapshot ref does not resolve in the store (never stored or dropped)."""


class StorageFullError(TvcError):
    """Snapshot store byte cap would be exceeded."""


class SandboxDeadError(TvcError):
    """Operation on a stopped sandbox handle."""


class MalformedArgsError(TvcError):
    """Tool arguments do not match the tool's expected shape."""


class QueryParseError(MalformedArgsError):
    """Query expression does not parse under the sandbox's grammar."""


class BackendUnavailableError(TvcError):
    """Sandbox backend cannot supply a working handle."""


class CacheUnavailableError(TvcError):
    """Cache service unreachable; callers should fail open."""
