"""HTTP service exposing the cache, with periodic crash-safe persistence.

One process serves one shard; task routing (fnv1a64(task_id) mod shard
count) is owned by clients, matching the fact that task graphs are fully
independent. Request bodies and responses are JSON with base64 payloads so
any client stack can speak the protocol.

Endpoints: PUT /put, POST /get (plus a GET alias carrying the trajectory in
headers), POST /prefix_match, POST /release, GET /stats, GET /graph,
PUT/GET /task_blob, POST /persist_now, GET /healthz.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .descriptors import ToolDescriptor, ToolResult, fnv1a64
from .errors import (
    CorruptGraphFileError,
    LeaseExpiredError,
    MissingPrefixError,
    UnknownLeaseError,
    VersionMismatchError,
)
from .executor import STATEFUL_SKIP, STRICT, LocalCache
from .forkpool import ForkPool
from .persistence import persist_atomic, restore
from .snapshot import SnapshotRef
from .tcg import GraphRegistry

logger = logging.getLogger(__name__)

PERSIST_SUFFIX = ".tvc"


@dataclass(slots=True)
class ServerConfig:
    listen: str = "127.0.0.1:8077"
    shard_count: int = 1
    shard_index: int = 0
    persist_interval_s: float = 30.0
    persist_dir: str | None = None
    default_snapshot_budget: int = 64
    lease_ttl_s: float = 300.0
    max_inflight: int = 256
    request_log: str | None = None  # "off" disables; default derives from persist_dir

    def __post_init__(self) -> None:
        if self.shard_count < 1:
            raise ValueError("shard_count must be >= 1")
        if not (0 <= self.shard_index < self.shard_count):
            raise ValueError("shard_index out of range")
        if self.persist_interval_s <= 0:
            raise ValueError("persist_interval_s must be positive")

    @property
    def host(self) -> str:
        host, _, _ = self.listen.rpartition(":")
        return host or "127.0.0.1"

    @property
    def port(self) -> int:
        _, _, port = self.listen.rpartition(":")
        return int(port)

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None, **overrides) -> "ServerConfig":
        env = dict(os.environ if env is None else env)
        kwargs: dict = {}
        if "TVC_LISTEN" in env:
            kwargs["listen"] = env["TVC_LISTEN"]
        if "TVC_PERSIST_DIR" in env:
            kwargs["persist_dir"] = env["TVC_PERSIST_DIR"]
        if "TVC_SHARDS" in env:
            kwargs["shard_count"] = int(env["TVC_SHARDS"])
        if "TVC_SHARD_INDEX" in env:
            kwargs["shard_index"] = int(env["TVC_SHARD_INDEX"])
        if "TVC_BUDGET" in env:
            kwargs["default_snapshot_budget"] = int(env["TVC_BUDGET"])
        if "TVC_LEASE_TTL_S" in env:
            kwargs["lease_ttl_s"] = float(env["TVC_LEASE_TTL_S"])
        if "TVC_PERSIST_INTERVAL_S" in env:
            kwargs["persist_interval_s"] = float(env["TVC_PERSIST_INTERVAL_S"])
        if "TVC_REQUEST_LOG" in env:
            kwargs["request_log"] = env["TVC_REQUEST_LOG"]
        kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path, *, env: dict[str, str] | None = None,
                  **overrides) -> "ServerConfig":
        """Key-value config file: one ``key = value`` pair per line, ``#``
        comments. Keys match the TVC_* environment variables, which take
        precedence over the file; explicit overrides beat both."""
        values: dict[str, str] = {}
        for raw_line in Path(path).read_text("utf-8").splitlines():
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw_line!r}")
            key, value = line.split("=", 1)
            values[key.strip().upper()] = value.strip()
        values.update(os.environ if env is None else env)
        return cls.from_env(values, **overrides)


def shard_for_task(task_id: str, shard_count: int) -> int:
    """The routing rule clients apply: stable across restarts."""
    return fnv1a64(task_id) % shard_count


class _HttpError(Exception):
    def __init__(self, status: int, message: str) -> None:
        super().__init__(message)
        self.status = status
        self.message = message


def descriptor_from_wire(record: dict) -> ToolDescriptor:
    try:
        return ToolDescriptor(
            record["tool"], record["args_canonical"], bool(record["mutates_state"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise _HttpError(400, f"bad descriptor: {exc}")


def descriptor_to_wire(descriptor: ToolDescriptor) -> dict:
    return {
        "tool": descriptor.tool_name,
        "args_canonical": descriptor.args_canonical,
        "mutates_state": descriptor.mutates_state,
    }


def trajectory_from_wire(records: list) -> list[ToolDescriptor]:
    if not isinstance(records, list):
        raise _HttpError(400, "trajectory must be a list")
    return [descriptor_from_wire(r) for r in records]


def result_to_wire(result: ToolResult) -> dict:
    return {
        "payload_b64": base64.b64encode(result.payload).decode("ascii"),
        "status": result.status,
        "exec_ms": result.exec_ms,
    }


def result_from_wire(record: dict) -> ToolResult:
    try:
        return ToolResult(
            base64.b64decode(record["payload_b64"]),
            record.get("status", "ok"),
            float(record.get("exec_ms", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise _HttpError(400, f"bad result: {exc}")


class CacheServer:
    """Cache state plus the persistence loop behind the HTTP front end."""

    def __init__(self, config: ServerConfig, *, pool: ForkPool | None = None) -> None:
        self.config = config
        self.registry = GraphRegistry(
            default_budget=config.default_snapshot_budget,
            lease_ttl_s=config.lease_ttl_s,
        )
        self.cache = LocalCache(self.registry)
        self.pool = pool
        self.blobs: dict[tuple[str, str], bytes] = {}
        self._blob_lock = threading.Lock()
        self._persisted_versions: dict[str, int] = {}
        self._inflight = 0
        self._inflight_lock = threading.Lock()
        self.started_at = time.time()
        self.persist_cycles = 0
        self.last_persist_ts: float | None = None
        self.corrupt_graph_events = 0
        self._stop = threading.Event()
        self._persist_thread: threading.Thread | None = None
        self._request_log_fh = None
        self._request_log_lock = threading.Lock()
        self._httpd: ThreadingHTTPServer | None = None
        if config.persist_dir:
            Path(config.persist_dir).mkdir(parents=True, exist_ok=True)
        self._open_request_log()
        if config.persist_dir:
            self.restore_all()

    # -- persistence -------------------------------------------------------

    def restore_all(self) -> int:
        assert self.config.persist_dir is not None
        restored = 0
        for path in sorted(Path(self.config.persist_dir).glob(f"*{PERSIST_SUFFIX}")):
            try:
                graph = restore(path, lease_ttl_s=self.config.lease_ttl_s)
            except (CorruptGraphFileError, VersionMismatchError) as exc:
                self.corrupt_graph_events += 1
                logger.error("could not restore %s: %s", path, exc)
                continue
            self.registry.adopt(graph)
            self._persisted_versions[graph.task_id] = graph.version
            restored += 1
        return restored

    def _graph_path(self, task_id: str) -> Path:
        assert self.config.persist_dir is not None
        return Path(self.config.persist_dir) / f"{fnv1a64(task_id):016x}{PERSIST_SUFFIX}"

    def persist_now(self) -> int:
        """Persist every dirty graph atomically; returns how many were written."""
        if not self.config.persist_dir:
            return 0
        written = 0
        for graph in self.registry.graphs():
            graph.expire_leases()
            version = graph.version
            if self._persisted_versions.get(graph.task_id) == version:
                continue
            try:
                persist_atomic(graph, self._graph_path(graph.task_id))
            except OSError as exc:
                logger.error("persist of task %s failed: %s", graph.task_id, exc)
                continue
            self._persisted_versions[graph.task_id] = version
            written += 1
        self.persist_cycles += 1
        self.last_persist_ts = time.time()
        return written

    def _persist_loop(self) -> None:
        while not self._stop.wait(self.config.persist_interval_s):
            try:
                self.persist_now()
            except Exception:
                logger.exception("persistence cycle failed; serving continues")

    # -- request logging -----------------------------------------------------

    def _open_request_log(self) -> None:
        target = self.config.request_log
        if target is None and self.config.persist_dir:
            target = str(Path(self.config.persist_dir) / "requests.jsonl")
        if not target or target == "off":
            return
        self._request_log_fh = open(target, "a", encoding="utf-8", buffering=1)

    def log_request(self, endpoint: str, task_id: str | None, latency_us: int, outcome: int) -> None:
        if self._request_log_fh is None:
            return
        line = json.dumps(
            {
                "ts": round(time.time(), 6),
                "endpoint": endpoint,
                "task": f"{fnv1a64(task_id):016x}" if task_id else None,
                "latency_us": latency_us,
                "outcome": outcome,
            },
            separators=(",", ":"),
        )
        with self._request_log_lock:
            self._request_log_fh.write(line + "\n")

    # -- request guard ---------------------------------------------------------

    def request_slot(self) -> bool:
        with self._inflight_lock:
            if self._inflight >= self.config.max_inflight:
                return False
            self._inflight += 1
            return True

    def release_slot(self) -> None:
        with self._inflight_lock:
            self._inflight -= 1

    # -- endpoint bodies ---------------------------------------------------------

    def handle_put(self, body: dict) -> dict:
        task_id = _require_str(body, "task_id")
        trajectory = trajectory_from_wire(body.get("trajectory"))
        if not trajectory:
            raise _HttpError(400, "trajectory must be non-empty")
        result = result_from_wire(_require_dict(body, "result"))
        mode = _mode_of(body)
        snapshot = None
        if body.get("snapshot_id"):
            snapshot = SnapshotRef(
                snapshot_id=str(body["snapshot_id"]),
                size_bytes=int(body.get("snapshot_size_bytes", 0)),
                serialize_ms=float(body.get("snapshot_serialize_ms", 0.0)),
                backend_kind=str(body.get("snapshot_backend_kind", "unknown")),
                created_at=time.time(),
            )
        try:
            node_id = self.cache.put(task_id, trajectory, result, snapshot, mode)
        except MissingPrefixError as exc:
            raise _HttpError(409, str(exc))
        return {"node_id": node_id}

    def handle_get(self, body: dict) -> dict:
        task_id = _require_str(body, "task_id")
        trajectory = trajectory_from_wire(body.get("trajectory"))
        mode = _mode_of(body)
        result = self.cache.get(task_id, trajectory, mode)
        if result is None:
            return {"hit": False}
        return {"hit": True, "result": result_to_wire(result)}

    def handle_prefix_match(self, body: dict) -> dict:
        task_id = _require_str(body, "task_id")
        trajectory = trajectory_from_wire(body.get("trajectory"))
        mode = _mode_of(body)
        match = self.cache.prefix_match(task_id, trajectory, mode)
        response: dict = {"matched_len": match.matched_len, "node_id": match.node_id}
        if match.lease_id is not None:
            assert match.snapshot is not None
            response["snapshot_id"] = match.snapshot.snapshot_id
            response["snapshot_node_id"] = match.snapshot_node_id
            response["snapshot_depth"] = match.snapshot_depth
            response["lease_id"] = match.lease_id
        return response

    def handle_release(self, body: dict) -> dict:
        task_id = _require_str(body, "task_id")
        lease_id = _require_str(body, "lease_id")
        try:
            self.cache.release(task_id, lease_id)
        except LeaseExpiredError as exc:
            raise _HttpError(410, str(exc))
        except UnknownLeaseError as exc:
            raise _HttpError(404, str(exc))
        return {"released": True}

    def handle_stats(self) -> dict:
        per_task = {
            graph.task_id: {
                **graph.stats.as_dict(),
                "nodes": graph.node_count(),
                "snapshots": graph.snapshot_count(),
                "live_leases": graph.live_leases(),
                "snapshot_budget": graph.snapshot_budget,
            }
            for graph in self.registry.graphs()
        }
        stats = {
            "global": self.registry.global_stats(),
            "tasks": per_task,
            "server": {
                "shard_index": self.config.shard_index,
                "shard_count": self.config.shard_count,
                "started_at": self.started_at,
                "inflight": self._inflight,
            },
            "persistence": {
                "cycles": self.persist_cycles,
                "last_ts": self.last_persist_ts,
                "corrupt_graph_events": self.corrupt_graph_events,
                "dir": self.config.persist_dir,
            },
        }
        if self.pool is not None:
            stats["pool"] = self.pool.metrics()
        return stats

    def handle_graph(self, task_id: str) -> str:
        graph = self.registry.get(task_id)
        if graph is None:
            raise _HttpError(404, f"unknown task {task_id!r}")
        return graph.export_dot()

    def handle_blob_put(self, body: dict) -> dict:
        task_id = _require_str(body, "task_id")
        key = _require_str(body, "key")
        try:
            value = base64.b64decode(_require_str(body, "value_b64"))
        except ValueError as exc:
            raise _HttpError(400, f"bad value_b64: {exc}")
        with self._blob_lock:
            self.blobs[(task_id, key)] = value
        return {"stored": True}

    def handle_blob_get(self, task_id: str, key: str) -> dict:
        with self._blob_lock:
            value = self.blobs.get((task_id, key))
        if value is None:
            raise _HttpError(404, "no such blob")
        return {"value_b64": base64.b64encode(value).decode("ascii")}

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer((self.config.host, self.config.port), handler)
        self._httpd.daemon_threads = True
        self._persist_thread = threading.Thread(target=self._persist_loop, daemon=True)
        self._persist_thread.start()
        threading.Thread(target=self._httpd.serve_forever, args=(0.5,), daemon=True).start()

    @property
    def port(self) -> int:
        assert self._httpd is not None
        return self._httpd.server_address[1]

    def serve_forever(self) -> None:
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer((self.config.host, self.config.port), handler)
        self._httpd.daemon_threads = True
        self._persist_thread = threading.Thread(target=self._persist_loop, daemon=True)
        self._persist_thread.start()
        try:
            self._httpd.serve_forever(poll_interval=0.5)
        finally:
            self.shutdown()

    def shutdown(self) -> None:
        self._stop.set()
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        if self.config.persist_dir:
            try:
                self.persist_now()
            except Exception:
                logger.exception("final persistence failed")
        if self._request_log_fh is not None:
            self._request_log_fh.close()
            self._request_log_fh = None


def _require_str(body: dict, key: str) -> str:
    value = body.get(key)
    if not isinstance(value, str) or not value:
        raise _HttpError(400, f"missing or invalid {key!r}")
    return value


def _require_dict(body: dict, key: str) -> dict:
    value = body.get(key)
    if not isinstance(value, dict):
        raise _HttpError(400, f"missing or invalid {key!r}")
    return value


def _mode_of(body: dict) -> str:
    mode = body.get("mode", STRICT)
    if mode not in (STRICT, STATEFUL_SKIP):
        raise _HttpError(400, f"unknown mode {mode!r}")
    return mode


def _make_handler(server: CacheServer):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        # Headers and body are separate small writes; without TCP_NODELAY
        # Nagle holds the body behind the peer's delayed ACK (~40 ms stalls).
        disable_nagle_algorithm = True

        # Suppress the default stderr access log; structured logging replaces it.
        def log_message(self, format: str, *args) -> None:
            pass

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length", 0))
            if length == 0:
                return {}
            raw = self.rfile.read(length)
            try:
                body = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise _HttpError(400, f"body is not valid JSON: {exc}")
            if not isinstance(body, dict):
                raise _HttpError(400, "body must be a JSON object")
            return body

        def _reply(self, status: int, payload: dict | str, content_type: str = "application/json") -> None:
            if isinstance(payload, str):
                data = payload.encode("utf-8")
            else:
                data = json.dumps(payload, separators=(",", ":")).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _dispatch(self, method: str) -> None:
            start = time.perf_counter()
            url = urlparse(self.path)
            route = (method, url.path)
            task_id: str | None = None
            status = 500
            if not server.request_slot():
                self._reply(503, {"error": "shard overloaded"})
                return
            try:
                body: dict = {}
                if method in ("POST", "PUT"):
                    body = self._read_body()
                    task_id = body.get("task_id") if isinstance(body.get("task_id"), str) else None
                if route == ("PUT", "/put"):
                    response: dict | str = server.handle_put(body)
                elif route == ("POST", "/get"):
                    response = server.handle_get(body)
                elif route == ("GET", "/get"):
                    body = self._get_alias_body()
                    task_id = body.get("task_id")
                    response = server.handle_get(body)
                elif route == ("POST", "/prefix_match"):
                    response = server.handle_prefix_match(body)
                elif route == ("POST", "/release"):
                    response = server.handle_release(body)
                elif route == ("GET", "/stats"):
                    response = server.handle_stats()
                elif route == ("GET", "/graph"):
                    params = parse_qs(url.query)
                    task_id = params.get("task_id", [None])[0]
                    if task_id is None:
                        raise _HttpError(400, "task_id query parameter required")
                    self._reply(200, server.handle_graph(task_id), content_type="text/vnd.graphviz")
                    status = 200
                    return
                elif route == ("PUT", "/task_blob"):
                    response = server.handle_blob_put(body)
                elif route == ("GET", "/task_blob"):
                    params = parse_qs(url.query)
                    task_id = params.get("task_id", [None])[0]
                    key = params.get("key", [None])[0]
                    if task_id is None or key is None:
                        raise _HttpError(400, "task_id and key query parameters required")
                    response = server.handle_blob_get(task_id, key)
                elif route == ("POST", "/persist_now"):
                    response = {"written": server.persist_now()}
                elif route == ("GET", "/healthz"):
                    response = {"ok": True}
                else:
                    raise _HttpError(404, f"no route {method} {url.path}")
                status = 200
                self._reply(200, response)
            except _HttpError as exc:
                status = exc.status
                self._reply(exc.status, {"error": exc.message})
            except Exception as exc:
                logger.exception("unhandled error serving %s %s", method, url.path)
                status = 500
                self._reply(500, {"error": f"internal error: {exc}"})
            finally:
                server.release_slot()
                latency_us = int((time.perf_counter() - start) * 1e6)
                server.log_request(url.path, task_id, latency_us, status)

        def _get_alias_body(self) -> dict:
            """GET /get carries the key in headers: the hash for routing and
            the full trajectory (base64 JSON; separator control characters
            cannot travel in header values)."""
            task_id = self.headers.get("X-Tvc-Task")
            encoded = self.headers.get("X-Tvc-Key")
            if not task_id or not encoded:
                raise _HttpError(400, "X-Tvc-Task and X-Tvc-Key headers required")
            try:
                trajectory = json.loads(base64.b64decode(encoded))
            except (ValueError, json.JSONDecodeError) as exc:
                raise _HttpError(400, f"bad X-Tvc-Key: {exc}")
            return {
                "task_id": task_id,
                "trajectory": trajectory,
                "mode": self.headers.get("X-Tvc-Mode", STRICT),
            }

        def do_GET(self) -> None:
            self._dispatch("GET")

        def do_POST(self) -> None:
            self._dispatch("POST")

        def do_PUT(self) -> None:
            self._dispatch("PUT")

    return Handler
