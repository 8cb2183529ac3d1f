"""Tool descriptors, results, and trajectory key encoding.

A trajectory (the ordered tool calls issued so far in a rollout) is the cache
key. Every descriptor serializes to a canonical string key so that two
semantically identical calls always produce the same key regardless of
argument ordering or formatting, and the full trajectory encodes injectively
by joining descriptor keys with a separator that cannot appear inside them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

UNIT_SEP = "\x1f"   # separates fields inside one descriptor key
RECORD_SEP = "\x1e"  # separates descriptor keys inside a trajectory key

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a hash, used for shard routing and log correlation only."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_args(args: Mapping[str, Any] | None) -> str:
    """Serialize an argument mapping to its canonical text form.

    Keys are sorted lexicographically, insignificant whitespace is dropped,
    and numbers render in Python's shortest round-trip form, so semantically
    identical argument sets always serialize identically.
    """
    if args is None:
        args = {}
    return json.dumps(args, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True, slots=True)
class ToolDescriptor:
    """One tool invocation: name, canonical arguments, statefulness flag."""

    tool_name: str
    args_canonical: str
    mutates_state: bool

    def __post_init__(self) -> None:
        if not self.tool_name:
            raise ValueError("tool_name must be non-empty")
        if UNIT_SEP in self.tool_name or RECORD_SEP in self.tool_name:
            raise ValueError("tool_name must not contain U+001F or U+001E separators")
        if UNIT_SEP in self.args_canonical or RECORD_SEP in self.args_canonical:
            raise ValueError("args_canonical must not contain U+001F or U+001E separators")

    @classmethod
    def make(cls, tool_name: str, args: Mapping[str, Any] | None = None, *,
             mutates_state: bool) -> "ToolDescriptor":
        return cls(tool_name, canonical_args(args), mutates_state)

    def key(self) -> str:
        """Injective map key. Statefulness is part of identity so flipping the
        flag can never alias a previously cached entry."""
        suffix = "M" if self.mutates_state else "P"
        return f"{self.tool_name}{UNIT_SEP}{self.args_canonical}{UNIT_SEP}{suffix}"

    def args(self) -> dict[str, Any]:
        return json.loads(self.args_canonical)


Trajectory = tuple[ToolDescriptor, ...]


def as_trajectory(steps: Iterable[ToolDescriptor]) -> Trajectory:
    return tuple(steps)


def encode_trajectory(steps: Sequence[ToolDescriptor]) -> str:
    """Wire encoding of a trajectory: descriptor keys joined by U+001E."""
    return RECORD_SEP.join(d.key() for d in steps)


def trajectory_hash(steps: Sequence[ToolDescriptor]) -> int:
    """Stable hash of the encoded key. Routing and logging only, never equality."""
    return fnv1a64(encode_trajectory(steps))


def filter_stateful(steps: Sequence[ToolDescriptor]) -> Trajectory:
    """Subsequence of state-mutating steps, order preserved."""
    return tuple(d for d in steps if d.mutates_state)


@dataclass(frozen=True, slots=True)
class ToolResult:
    """Outcome of one tool execution. Payload is immutable once cached."""

    payload: bytes
    status: str = "ok"  # "ok" | "tool_error"
    exec_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.status not in ("ok", "tool_error"):
            raise ValueError(f"invalid status {self.status!r}")
        if self.exec_ms < 0:
            raise ValueError("exec_ms must be >= 0")
        if not isinstance(self.payload, bytes):
            raise TypeError("payload must be bytes")

    @classmethod
    def ok(cls, payload: bytes | str, exec_ms: float = 0.0) -> "ToolResult":
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        return cls(payload, "ok", exec_ms)

    @classmethod
    def error(cls, payload: bytes | str, exec_ms: float = 0.0) -> "ToolResult":
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        return cls(payload, "tool_error", exec_ms)

    @property
    def text(self) -> str:
        return self.payload.decode("utf-8")

    def same_value(self, other: "ToolResult") -> bool:
        """Bitwise value equality, ignoring the measured execution time."""
        return self.payload == other.payload and self.status == other.status
