"""Crash-safe persistence of task graphs.

Format: a version header line ``TVC1``, then one length-prefixed JSON record
per node in breadth-first order (children ordered by descriptor key). Each
record's byte length is written as ASCII decimal followed by a newline, then
the UTF-8 JSON bytes and a trailing newline. Live refcounts and leases are
deliberately not persisted; a restored graph starts unpinned.
"""

from __future__ import annotations

import base64
import itertools
import json
import os
from pathlib import Path
from typing import BinaryIO

from .descriptors import ToolDescriptor, ToolResult
from .errors import CorruptGraphFileError, VersionMismatchError
from .snapshot import SnapshotRef
from .tcg import ROOT_ID, TaskGraph, TcgNode

MAGIC = b"TVC1\n"
_MAX_RECORD_BYTES = 64 * 1024 * 1024


def _b64(payload: bytes) -> str:
    return base64.b64encode(payload).decode("ascii")


def _unb64(encoded: str) -> bytes:
    return base64.b64decode(encoded.encode("ascii"))


def _result_record(result: ToolResult) -> dict:
    return {
        "payload_b64": _b64(result.payload),
        "status": result.status,
        "exec_ms": result.exec_ms,
    }


def _result_from(record: dict) -> ToolResult:
    return ToolResult(_unb64(record["payload_b64"]), record["status"], float(record["exec_ms"]))


def _descriptor_record(desc: ToolDescriptor) -> dict:
    return {
        "tool": desc.tool_name,
        "args_canonical": desc.args_canonical,
        "mutates_state": desc.mutates_state,
    }


def _descriptor_from(record: dict) -> ToolDescriptor:
    return ToolDescriptor(record["tool"], record["args_canonical"], bool(record["mutates_state"]))


def _node_record(node: TcgNode, parent_id: int | None) -> dict:
    record: dict = {
        "kind": "node",
        "node_id": node.node_id,
        "parent_id": parent_id,
        "hit_count": node.hit_count,
        "created_at": node.created_at,
        "snapshot_id": node.snapshot.snapshot_id if node.snapshot else None,
    }
    if node.snapshot is not None:
        record["snapshot"] = node.snapshot.as_dict()
    if node.descriptor is not None:
        record.update(_descriptor_record(node.descriptor))
    if node.result is not None:
        record["result"] = _result_record(node.result)
    if node.attachments:
        record["attachments"] = [
            {**_descriptor_record(d), "result": _result_record(r)}
            for key, (d, r) in sorted(node.attachments.items())
        ]
    return record


def persist(graph: TaskGraph, destination: str | Path | BinaryIO) -> None:
    """Write the graph to ``destination`` (path or binary stream)."""
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            _write(graph, fh)
    else:
        _write(graph, destination)


def _write(graph: TaskGraph, fh: BinaryIO) -> None:
    fh.write(MAGIC)
    meta = {
        "kind": "meta",
        "task_id": graph.task_id,
        "snapshot_budget": graph.snapshot_budget,
        "node_count": graph.node_count(),
        "next_node_id": max(graph.nodes) + 1,
        "stats": graph.stats.as_dict(),
    }
    _write_record(fh, meta)
    for node, parent_id in graph.iter_bfs():
        _write_record(fh, _node_record(node, parent_id))


def _write_record(fh: BinaryIO, record: dict) -> None:
    payload = json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(f"{len(payload)}\n".encode("ascii"))
    fh.write(payload)
    fh.write(b"\n")


def persist_atomic(graph: TaskGraph, path: str | Path) -> None:
    """Persist via write-temp-then-rename so a crash never damages the
    previous complete file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        _write(graph, fh)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def restore(source: str | Path | BinaryIO, **graph_kwargs) -> TaskGraph:
    """Rebuild a graph persisted by :func:`persist`.

    Structure, results, snapshot refs, hit counts, and stats round-trip;
    refcounts and leases reset. Raises :class:`CorruptGraphFileError` on
    damage (no partial graph is ever returned) and
    :class:`VersionMismatchError` on a foreign header.
    """
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return _read(fh, **graph_kwargs)
    return _read(source, **graph_kwargs)


def _read(fh: BinaryIO, **graph_kwargs) -> TaskGraph:
    header = fh.read(len(MAGIC))
    if len(header) < len(MAGIC):
        raise CorruptGraphFileError("truncated header", offset=len(header))
    if header != MAGIC:
        raise VersionMismatchError(f"unknown format header {header!r}")
    offset = len(MAGIC)

    records: list[tuple[dict, int]] = []
    while True:
        length_line = fh.readline()
        if not length_line:
            break
        record_offset = offset
        offset += len(length_line)
        try:
            length = int(length_line.strip())
        except ValueError:
            raise CorruptGraphFileError("bad record length prefix", offset=record_offset)
        if not (0 < length <= _MAX_RECORD_BYTES):
            raise CorruptGraphFileError("record length out of range", offset=record_offset)
        payload = fh.read(length)
        offset += len(payload)
        if len(payload) < length:
            raise CorruptGraphFileError("truncated record payload", offset=record_offset)
        newline = fh.read(1)
        offset += len(newline)
        if newline != b"\n":
            raise CorruptGraphFileError("missing record terminator", offset=record_offset)
        try:
            record = json.loads(payload)
        except json.JSONDecodeError:
            raise CorruptGraphFileError("record is not valid JSON", offset=record_offset)
        records.append((record, record_offset))

    if not records or records[0][0].get("kind") != "meta":
        raise CorruptGraphFileError("missing meta record", offset=len(MAGIC))
    meta, meta_offset = records[0]

    graph = TaskGraph(
        meta["task_id"],
        snapshot_budget=int(meta["snapshot_budget"]),
        **graph_kwargs,
    )
    node_records = [r for r in records[1:]]
    if len(node_records) != int(meta["node_count"]):
        raise CorruptGraphFileError(
            f"expected {meta['node_count']} node records, found {len(node_records)}",
            offset=meta_offset,
        )
    try:
        _rebuild_nodes(graph, node_records)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptGraphFileError(f"malformed node record: {exc}", offset=meta_offset)

    stats = meta.get("stats", {})
    for field_name, value in stats.items():
        if hasattr(graph.stats, field_name):
            setattr(graph.stats, field_name, int(value))
    return graph


def _rebuild_nodes(graph: TaskGraph, node_records: list[tuple[dict, int]]) -> None:
    for record, record_offset in node_records:
        node_id = int(record["node_id"])
        parent_id = record["parent_id"]
        if node_id == ROOT_ID:
            if parent_id is not None:
                raise CorruptGraphFileError("root must have no parent", offset=record_offset)
            node = graph.nodes[ROOT_ID]
            node.hit_count = int(record["hit_count"])
            node.created_at = float(record["created_at"])
        else:
            parent = graph.nodes.get(int(parent_id)) if parent_id is not None else None
            if parent is None:
                raise CorruptGraphFileError(
                    f"node {node_id} references unknown parent {parent_id}",
                    offset=record_offset,
                )
            descriptor = _descriptor_from(record)
            node = TcgNode(
                node_id,
                descriptor,
                _result_from(record["result"]),
                depth=parent.depth + 1,
                created_at=float(record["created_at"]),
                hit_count=int(record["hit_count"]),
            )
            if record.get("snapshot") is not None:
                node.snapshot = SnapshotRef.from_dict(record["snapshot"])
            key = descriptor.key()
            if key in parent.children:
                raise CorruptGraphFileError(
                    f"duplicate child key under node {parent.node_id}",
                    offset=record_offset,
                )
            parent.children[key] = node_id
            graph.nodes[node_id] = node
        for attachment in record.get("attachments", ()):
            desc = _descriptor_from(attachment)
            node.attachments[desc.key()] = (desc, _result_from(attachment["result"]))
    # Reseed the id counter above everything restored.
    graph._ids = itertools.count(max(graph.nodes) + 1)
