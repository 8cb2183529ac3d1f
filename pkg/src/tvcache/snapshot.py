"""Selective snapshotting: when a sandbox snapshot pays for itself, and where
snapshot bytes live.

A snapshot is stored only when re-executing the tool would cost more than
serializing the sandbox now plus restoring it later. Serialize/restore costs
are tracked per backend kind as exponentially weighted moving averages fed by
real measurements.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from .errors import StorageFullError, UnknownSnapshotError

logger = logging.getLogger(__name__)

# Pessimistic prior: until a backend has been measured, assume snapshots are
# expensive so early cheap tools are never snapshotted.
DEFAULT_COLD_START_MS = 1000.0
DEFAULT_EMA_ALPHA = 0.2


@dataclass(frozen=True, slots=True)
class SnapshotRef:
    """Handle to stored snapshot bytes."""

    snapshot_id: str
    size_bytes: int
    serialize_ms: float
    backend_kind: str
    created_at: float

    def as_dict(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "size_bytes": self.size_bytes,
            "serialize_ms": self.serialize_ms,
            "backend_kind": self.backend_kind,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SnapshotRef":
        return cls(
            snapshot_id=data["snapshot_id"],
            size_bytes=int(data["size_bytes"]),
            serialize_ms=float(data["serialize_ms"]),
            backend_kind=data["backend_kind"],
            created_at=float(data["created_at"]),
        )


class CostModel:
    """Per-backend EMAs of measured serialize and restore durations."""

    def __init__(
        self,
        *,
        ema_alpha: float = DEFAULT_EMA_ALPHA,
        cold_start_ms: float = DEFAULT_COLD_START_MS,
    ) -> None:
        if not (0.0 < ema_alpha <= 1.0):
            raise ValueError("ema_alpha must be in (0, 1]")
        self.ema_alpha = ema_alpha
        self.cold_start_ms = cold_start_ms
        self._serialize: dict[str, float] = {}
        self._restore: dict[str, float] = {}
        self._lock = threading.Lock()

    def serialize_ms_ema(self, backend_kind: str) -> float:
        with self._lock:
            return self._serialize.get(backend_kind, self.cold_start_ms)

    def restore_ms_ema(self, backend_kind: str) -> float:
        with self._lock:
            return self._restore.get(backend_kind, self.cold_start_ms)

    def overhead_ms(self, backend_kind: str) -> float:
        """Serialize + restore estimate: what a snapshot will cost end to end."""
        with self._lock:
            return (
                self._serialize.get(backend_kind, self.cold_start_ms)
                + self._restore.get(backend_kind, self.cold_start_ms)
            )

    def observe_serialize(self, backend_kind: str, serialize_ms: float) -> None:
        if serialize_ms < 0:
            raise ValueError("serialize_ms must be >= 0")
        with self._lock:
            prev = self._serialize.get(backend_kind, self.cold_start_ms)
            self._serialize[backend_kind] = (1 - self.ema_alpha) * prev + self.ema_alpha * serialize_ms

    def observe_restore(self, backend_kind: str, restore_ms: float) -> None:
        if restore_ms < 0:
            raise ValueError("restore_ms must be >= 0")
        with self._lock:
            prev = self._restore.get(backend_kind, self.cold_start_ms)
            self._restore[backend_kind] = (1 - self.ema_alpha) * prev + self.ema_alpha * restore_ms


def should_snapshot(exec_ms: float, model: CostModel, backend_kind: str) -> bool:
    """True iff the tool ran strictly longer than the snapshot overhead estimate."""
    return exec_ms > model.overhead_ms(backend_kind)


class SnapshotStore:
    """Disk-backed snapshot bytes with an in-memory index and a global byte cap.

    Layout: ``<root>/<backend_kind>/<snapshot_id>.bin`` plus ``index.jsonl``
    (one record per live snapshot). The index is rewritten compacted on load.
    """

    def __init__(
        self,
        root: str | Path,
        *,
        max_bytes: int | None = None,
        cost_model: CostModel | None = None,
    ) -> None:
        self.root = Path(root)
        self.max_bytes = max_bytes
        self.cost_model = cost_model if cost_model is not None else CostModel()
        self._refs: dict[str, SnapshotRef] = {}
        self._bytes = 0
        self._lock = threading.Lock()
        self.root.mkdir(parents=True, exist_ok=True)
        self._index_path = self.root / "index.jsonl"
        self._load_index()

    def _load_index(self) -> None:
        if not self._index_path.exists():
            return
        kept: dict[str, SnapshotRef] = {}
        for line in self._index_path.read_text("utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                ref = SnapshotRef(
                    snapshot_id=record["id"],
                    size_bytes=int(record["size"]),
                    serialize_ms=float(record["serialize_ms"]),
                    backend_kind=record["backend_kind"],
                    created_at=float(record["created_at"]),
                )
            except (ValueError, KeyError, json.JSONDecodeError):
                logger.warning("skipping unreadable snapshot index line")
                continue
            if self._blob_path(ref).exists():
                kept[ref.snapshot_id] = ref
        self._refs = kept
        self._bytes = sum(r.size_bytes for r in kept.values())
        self._rewrite_index()

    def _blob_path(self, ref: SnapshotRef) -> Path:
        return self.root / ref.backend_kind / f"{ref.snapshot_id}.bin"

    def _rewrite_index(self) -> None:
        tmp = self._index_path.with_suffix(".tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            for ref in sorted(self._refs.values(), key=lambda r: r.created_at):
                fh.write(json.dumps(self._index_record(ref)) + "\n")
        os.replace(tmp, self._index_path)

    @staticmethod
    def _index_record(ref: SnapshotRef) -> dict:
        return {
            "id": ref.snapshot_id,
            "size": ref.size_bytes,
            "serialize_ms": ref.serialize_ms,
            "backend_kind": ref.backend_kind,
            "created_at": ref.created_at,
        }

    def store(
        self,
        snapshot_bytes: bytes,
        backend_kind: str,
        *,
        serialize_ms: float | None = None,
    ) -> SnapshotRef:
        """Persist snapshot bytes and record the measured serialize cost.

        ``serialize_ms`` is the backend's own serialization time when the
        caller measured it; the store adds its write time on top so the cost
        model sees the full price of producing a stored snapshot.
        """
        start = time.perf_counter()
        with self._lock:
            if self.max_bytes is not None and self._bytes + len(snapshot_bytes) > self.max_bytes:
                raise StorageFullError(
                    f"cap {self.max_bytes} B would be exceeded "
                    f"({self._bytes} B stored, {len(snapshot_bytes)} B incoming)"
                )
            snapshot_id = uuid.uuid4().hex
            kind_dir = self.root / backend_kind
            kind_dir.mkdir(parents=True, exist_ok=True)
            path = kind_dir / f"{snapshot_id}.bin"
            path.write_bytes(snapshot_bytes)
            write_ms = (time.perf_counter() - start) * 1000.0
            total_ms = write_ms + (serialize_ms or 0.0)
            ref = SnapshotRef(
                snapshot_id=snapshot_id,
                size_bytes=len(snapshot_bytes),
                serialize_ms=total_ms,
                backend_kind=backend_kind,
                created_at=time.time(),
            )
            self._refs[snapshot_id] = ref
            self._bytes += len(snapshot_bytes)
            with self._index_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(self._index_record(ref)) + "\n")
        self.cost_model.observe_serialize(backend_kind, total_ms)
        return ref

    def load(self, ref: SnapshotRef | str) -> bytes:
        snapshot_id = ref if isinstance(ref, str) else ref.snapshot_id
        with self._lock:
            live = self._refs.get(snapshot_id)
            if live is None:
                raise UnknownSnapshotError(f"snapshot {snapshot_id!r} not in store")
            return self._blob_path(live).read_bytes()

    def drop(self, ref: SnapshotRef | str) -> None:
        snapshot_id = ref if isinstance(ref, str) else ref.snapshot_id
        with self._lock:
            live = self._refs.pop(snapshot_id, None)
            if live is None:
                raise UnknownSnapshotError(f"snapshot {snapshot_id!r} not in store")
            self._bytes -= live.size_bytes
            try:
                self._blob_path(live).unlink()
            except FileNotFoundError:
                pass
            self._rewrite_index()

    def contains(self, snapshot_id: str) -> bool:
        with self._lock:
            return snapshot_id in self._refs

    def stored_bytes(self) -> int:
        with self._lock:
            return self._bytes

    def count(self) -> int:
        with self._lock:
            return len(self._refs)
