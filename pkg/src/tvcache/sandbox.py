"""Sandbox lifecycle contract and deterministic in-process reference backends.

A sandbox encapsulates the mutable state a rollout's tool calls act on. The
contract is deliberately small: start, stop, fork, execute, snapshot/restore,
plus a statefulness annotation per tool. Both reference backends here are
deterministic so they can serve as correctness oracles; real container or
database backends plug in behind the same interface and must pass
:func:`contract_suite` before use.
"""

from __future__ import annotations

import abc
import itertools
import json
import random
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from .descriptors import ToolDescriptor, ToolResult, canonical_args
from .errors import MalformedArgsError, QueryParseError, SandboxDeadError

_SPIN_TAIL_S = 0.0005


def wait_ms(ms: float) -> None:
    """Wait until ``ms`` of wall time has elapsed.

    Sleeps in coarse slices and spins only the final half millisecond, so the
    elapsed time is accurate without pinning the interpreter the way a pure
    spin would under many concurrent rollouts.
    """
    if ms <= 0:
        return
    deadline = time.perf_counter() + ms / 1000.0
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        if remaining > _SPIN_TAIL_S:
            time.sleep(min(remaining - _SPIN_TAIL_S, 0.05))


@dataclass(slots=True)
class SandboxHandle:
    """A live execution environment bound to one rollout at a time."""

    handle_id: str
    backend_kind: str
    alive: bool = True


class ToolExecutionEnvironment(abc.ABC):
    """The backend contract. Implementations own all per-handle state."""

    backend_kind: str = "abstract"

    @abc.abstractmethod
    def start(self) -> SandboxHandle:
        """Create a clean sandbox."""

    @abc.abstractmethod
    def stop(self, handle: SandboxHandle) -> None:
        """Tear a sandbox down; later operations on it fail sandbox-dead."""

    @abc.abstractmethod
    def fork(self, handle: SandboxHandle) -> SandboxHandle:
        """Copy a sandbox. Mutations on either side never affect the other."""

    @abc.abstractmethod
    def execute(self, handle: SandboxHandle, descriptor: ToolDescriptor) -> ToolResult:
        """Run one tool call. Deterministic: same state + same call, same result."""

    @abc.abstractmethod
    def will_mutate_state(self, descriptor: ToolDescriptor) -> bool:
        """Truthful statefulness annotation for ``descriptor``."""

    @abc.abstractmethod
    def snapshot(self, handle: SandboxHandle) -> bytes:
        """Serialize the sandbox state canonically."""

    @abc.abstractmethod
    def restore(self, snapshot_bytes: bytes) -> SandboxHandle:
        """Materialize a new sandbox that is state-equivalent to the snapshot."""

    def live_handles(self) -> int:
        """Number of currently alive sandboxes (leak accounting)."""
        return 0

    def descriptor(self, tool_name: str, args: dict[str, Any] | None = None) -> ToolDescriptor:
        """Build a descriptor with this backend's statefulness annotation."""
        probe = ToolDescriptor(tool_name, canonical_args(args), mutates_state=True)
        return ToolDescriptor(
            tool_name, probe.args_canonical, mutates_state=self.will_mutate_state(probe)
        )


class _HandleTable:
    """Shared bookkeeping for in-process backends."""

    def __init__(self, kind: str) -> None:
        self._kind = kind
        self._states: dict[str, Any] = {}
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def new(self, state: Any) -> SandboxHandle:
        with self._lock:
            handle_id = f"{self._kind}-{next(self._counter)}"
            self._states[handle_id] = state
        return SandboxHandle(handle_id, self._kind)

    def get(self, handle: SandboxHandle) -> Any:
        with self._lock:
            if not handle.alive or handle.handle_id not in self._states:
                raise SandboxDeadError(f"handle {handle.handle_id} is not alive")
            return self._states[handle.handle_id]

    def drop(self, handle: SandboxHandle) -> None:
        with self._lock:
            self._states.pop(handle.handle_id, None)
        handle.alive = False

    def count(self) -> int:
        with self._lock:
            return len(self._states)


class FileTreeSandbox(ToolExecutionEnvironment):
    """In-memory file tree; the desk-scale stand-in for a terminal sandbox.

    Tools: write/append/rm mutate, read/ls observe, sleep_ms simulates an
    expensive tool with controllable cost. ``op_latency_ms`` adds a fixed
    wait to every call and ``snapshot_cost_ms``/``restore_cost_ms`` simulate
    serialize/restore expense so snapshot policy has measurable ground truth.
    """

    backend_kind = "filetree"

    _MUTATING = frozenset({"write", "append", "rm"})
    _TOOLS = frozenset({"write", "append", "read", "ls", "rm", "sleep_ms"})

    def __init__(
        self,
        *,
        seed_state: dict[str, str] | None = None,
        op_latency_ms: float = 0.0,
        snapshot_cost_ms: float = 0.0,
        restore_cost_ms: float | None = None,
    ) -> None:
        self._seed = dict(seed_state or {})
        self.op_latency_ms = op_latency_ms
        self.snapshot_cost_ms = snapshot_cost_ms
        self.restore_cost_ms = snapshot_cost_ms if restore_cost_ms is None else restore_cost_ms
        self._handles = _HandleTable(self.backend_kind)

    @classmethod
    def from_listing_file(cls, path: str | Path, **kwargs) -> "FileTreeSandbox":
        """Seed initial state from a directory-listing JSON file (path -> content)."""
        listing = json.loads(Path(path).read_text("utf-8"))
        if not isinstance(listing, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in listing.items()
        ):
            raise MalformedArgsError("listing file must map path strings to content strings")
        return cls(seed_state=listing, **kwargs)

    def start(self) -> SandboxHandle:
        return self._handles.new(dict(self._seed))

    def stop(self, handle: SandboxHandle) -> None:
        self._handles.drop(handle)

    def fork(self, handle: SandboxHandle) -> SandboxHandle:
        files = self._handles.get(handle)
        return self._handles.new(dict(files))

    def will_mutate_state(self, descriptor: ToolDescriptor) -> bool:
        return descriptor.tool_name in self._MUTATING

    def live_handles(self) -> int:
        return self._handles.count()

    def execute(self, handle: SandboxHandle, descriptor: ToolDescriptor) -> ToolResult:
        files: dict[str, str] = self._handles.get(handle)
        name = descriptor.tool_name
        if name not in self._TOOLS:
            raise MalformedArgsError(f"unknown tool {name!r}")
        args = descriptor.args()
        start = time.perf_counter()
        if self.op_latency_ms:
            wait_ms(self.op_latency_ms)
        if name == "sleep_ms":
            duration = args.get("ms")
            if not isinstance(duration, (int, float)) or duration < 0:
                raise MalformedArgsError("sleep_ms requires non-negative {ms}")
            wait_ms(float(duration))
            status, payload = "ok", b""
        elif name == "ls":
            status, payload = "ok", "\n".join(sorted(files)).encode("utf-8")
        else:
            path = args.get("path")
            if not isinstance(path, str) or not path:
                raise MalformedArgsError(f"{name} requires a non-empty {{path}}")
            if name == "write":
                files[path] = self._content(args)
                status, payload = "ok", b""
            elif name == "append":
                files[path] = files.get(path, "") + self._content(args)
                status, payload = "ok", b""
            elif name == "rm":
                if path in files:
                    del files[path]
                    status, payload = "ok", b""
                else:
                    status, payload = "tool_error", b"no such file"
            else:  # read
                if path in files:
                    status, payload = "ok", files[path].encode("utf-8")
                else:
                    status, payload = "tool_error", b"no such file"
        exec_ms = (time.perf_counter() - start) * 1000.0
        return ToolResult(payload, status, exec_ms)

    @staticmethod
    def _content(args: dict[str, Any]) -> str:
        content = args.get("content", "")
        if not isinstance(content, str):
            raise MalformedArgsError("content must be a string")
        return content

    def snapshot(self, handle: SandboxHandle) -> bytes:
        files = self._handles.get(handle)
        if self.snapshot_cost_ms:
            wait_ms(self.snapshot_cost_ms)
        # Canonical form: sorted (path, content) pairs, length-prefixed, so
        # bitwise snapshot comparison means state equality.
        out = bytearray()
        for path in sorted(files):
            for chunk in (path.encode("utf-8"), files[path].encode("utf-8")):
                out += struct.pack(">I", len(chunk))
                out += chunk
        return bytes(out)

    def restore(self, snapshot_bytes: bytes) -> SandboxHandle:
        if self.restore_cost_ms:
            wait_ms(self.restore_cost_ms)
        files: dict[str, str] = {}
        view = memoryview(snapshot_bytes)
        pos = 0
        while pos < len(view):
            fields = []
            for _ in range(2):
                if pos + 4 > len(view):
                    raise MalformedArgsError("truncated snapshot")
                (length,) = struct.unpack_from(">I", view, pos)
                pos += 4
                if pos + length > len(view):
                    raise MalformedArgsError("truncated snapshot")
                fields.append(bytes(view[pos:pos + length]).decode("utf-8"))
                pos += length
            files[fields[0]] = fields[1]
        return self._handles.new(files)


class ReadOnlyQuerySandbox(ToolExecutionEnvironment):
    """Read-only aggregate queries over one in-memory table.

    Every call is stateless. The tiny grammar covers COUNT and SUM(col) with
    optional AND-joined column comparisons. A configurable artificial latency
    (default 56.6 ms) stands in for the network round trip of a remote
    database.
    """

    backend_kind = "readonly_query"

    DEFAULT_LATENCY_MS = 56.6

    _OPS: dict[str, Callable[[Any, Any], bool]] = {
        "=": lambda a, b: a == b,
        "!=": lambda a, b: a != b,
        "<": lambda a, b: a < b,
        "<=": lambda a, b: a <= b,
        ">": lambda a, b: a > b,
        ">=": lambda a, b: a >= b,
    }

    def __init__(
        self,
        rows: Sequence[dict[str, Any]] | None = None,
        *,
        latency_ms: float = DEFAULT_LATENCY_MS,
    ) -> None:
        self._rows = [dict(r) for r in (rows if rows is not None else self.example_table())]
        self.latency_ms = latency_ms
        self._handles = _HandleTable(self.backend_kind)

    @staticmethod
    def example_table() -> list[dict[str, Any]]:
        """A small farm-animals table: 12 pigs plus assorted others."""
        rows = [
            {"id": i + 1, "species": "pig", "age": 1 + (i % 4), "name": f"pig{i + 1}"}
            for i in range(12)
        ]
        for j, (species, age) in enumerate(
            [("cow", 5), ("cow", 7), ("hen", 1), ("hen", 2), ("hen", 3), ("goat", 4)]
        ):
            rows.append({"id": 13 + j, "species": species, "age": age, "name": f"{species}{j}"})
        return rows

    def start(self) -> SandboxHandle:
        return self._handles.new(self._rows)

    def stop(self, handle: SandboxHandle) -> None:
        self._handles.drop(handle)

    def fork(self, handle: SandboxHandle) -> SandboxHandle:
        rows = self._handles.get(handle)
        return self._handles.new(rows)

    def will_mutate_state(self, descriptor: ToolDescriptor) -> bool:
        return False

    def live_handles(self) -> int:
        return self._handles.count()

    def snapshot(self, handle: SandboxHandle) -> bytes:
        rows = self._handles.get(handle)
        return json.dumps(rows, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def restore(self, snapshot_bytes: bytes) -> SandboxHandle:
        return self._handles.new(json.loads(snapshot_bytes))

    def execute(self, handle: SandboxHandle, descriptor: ToolDescriptor) -> ToolResult:
        rows = self._handles.get(handle)
        if descriptor.tool_name != "query":
            raise MalformedArgsError("only the 'query' tool is supported")
        expr = descriptor.args().get("expr")
        if not isinstance(expr, str):
            raise MalformedArgsError("query requires {expr: str}")
        start = time.perf_counter()
        if self.latency_ms:
            wait_ms(self.latency_ms)
        value = self._evaluate(expr, rows)
        exec_ms = (time.perf_counter() - start) * 1000.0
        return ToolResult(str(value).encode("utf-8"), "ok", exec_ms)

    def _evaluate(self, expr: str, rows: list[dict[str, Any]]) -> Any:
        tokens = expr.split()
        if not tokens:
            raise QueryParseError("empty expression")
        head, rest = tokens[0].upper(), tokens[1:]
        if head == "COUNT":
            agg: Callable[[list[dict]], Any] = len
        elif head.startswith("SUM(") and head.endswith(")"):
            column = tokens[0][4:-1]
            if not column:
                raise QueryParseError("SUM needs a column")
            agg = lambda matched: sum(r.get(column, 0) for r in matched)  # noqa: E731
        else:
            raise QueryParseError(f"unknown aggregate {tokens[0]!r}")
        predicate = self._parse_where(rest)
        return agg([r for r in rows if predicate(r)])

    def _parse_where(self, tokens: list[str]) -> Callable[[dict], bool]:
        if not tokens:
            return lambda row: True
        if tokens[0].upper() != "WHERE":
            raise QueryParseError(f"expected WHERE, got {tokens[0]!r}")
        conditions: list[Callable[[dict], bool]] = []
        rest = tokens[1:]
        if not rest:
            raise QueryParseError("WHERE needs at least one condition")
        while rest:
            if len(rest) < 3:
                raise QueryParseError("incomplete condition")
            column, op, literal = rest[0], rest[1], rest[2]
            if op not in self._OPS:
                raise QueryParseError(f"unknown operator {op!r}")
            value = self._literal(literal)
            oper = self._OPS[op]
            conditions.append(
                lambda row, c=column, o=oper, v=value: c in row and _safe_cmp(o, row[c], v)
            )
            rest = rest[3:]
            if rest:
                if rest[0].upper() != "AND":
                    raise QueryParseError(f"expected AND, got {rest[0]!r}")
                rest = rest[1:]
        return lambda row: all(c(row) for c in conditions)

    @staticmethod
    def _literal(token: str) -> Any:
        if len(token) >= 2 and token[0] == "'" and token[-1] == "'":
            return token[1:-1]
        try:
            return int(token)
        except ValueError:
            pass
        try:
            return float(token)
        except ValueError:
            return token


def _safe_cmp(op: Callable[[Any, Any], bool], left: Any, right: Any) -> bool:
    try:
        return bool(op(left, right))
    except TypeError:
        return False


class BrokenReadSandbox(FileTreeSandbox):
    """Negative control: ``read`` secretly bumps a counter yet stays flagged
    stateless, so the statelessness contract check must fail."""

    backend_kind = "broken_read"

    def execute(self, handle: SandboxHandle, descriptor: ToolDescriptor) -> ToolResult:
        if descriptor.tool_name == "read":
            files = self._handles.get(handle)
            files["__reads__"] = str(int(files.get("__reads__", "0")) + 1)
        return super().execute(handle, descriptor)


# -- conformance ---------------------------------------------------------------


@dataclass(slots=True)
class ContractCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass(slots=True)
class ContractReport:
    backend_kind: str
    checks: list[ContractCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "backend_kind": self.backend_kind,
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks
            ],
        }


def default_descriptor_pool(env: ToolExecutionEnvironment) -> list[ToolDescriptor]:
    """Workload alphabet used by the contract suite for known backends."""
    if isinstance(env, ReadOnlyQuerySandbox):
        exprs = [
            "COUNT",
            "COUNT WHERE species = pig",
            "SUM(age)",
            "SUM(age) WHERE age >= 3",
            "COUNT WHERE species = hen AND age < 3",
        ]
        return [env.descriptor("query", {"expr": e}) for e in exprs]
    pool = []
    for path in ("a.txt", "b.txt"):
        pool.append(env.descriptor("write", {"path": path, "content": f"base:{path}"}))
        pool.append(env.descriptor("append", {"path": path, "content": "+"}))
        pool.append(env.descriptor("read", {"path": path}))
        pool.append(env.descriptor("rm", {"path": path}))
    pool.append(env.descriptor("ls", {}))
    return pool


def contract_suite(
    env: ToolExecutionEnvironment,
    descriptor_pool: Sequence[ToolDescriptor] | None = None,
    *,
    workloads: int = 8,
    ops_per_workload: int = 25,
    seed: int = 0,
) -> ContractReport:
    """Run the behavioral checks any backend must pass before the cache may
    trust it: fork isolation, execution determinism, snapshot/restore
    equivalence, and truthful statefulness annotations."""
    pool = list(descriptor_pool) if descriptor_pool is not None else default_descriptor_pool(env)
    report = ContractReport(env.backend_kind)
    rng = random.Random(seed)

    failures = {"fork_isolation": "", "determinism": "", "snapshot_restore": "", "statelessness": ""}
    for workload_idx in range(workloads):
        prefix = [rng.choice(pool) for _ in range(rng.randint(0, ops_per_workload // 2))]
        suffix = [rng.choice(pool) for _ in range(rng.randint(1, ops_per_workload))]

        base = env.start()
        for d in prefix:
            env.execute(base, d)
        state_before = env.snapshot(base)

        # Determinism: the same suffix from the same state gives the same bytes.
        twin_a, twin_b = env.restore(state_before), env.restore(state_before)
        results_a = [env.execute(twin_a, d) for d in suffix]
        results_b = [env.execute(twin_b, d) for d in suffix]
        for d, ra, rb in zip(suffix, results_a, results_b):
            if not ra.same_value(rb):
                failures["determinism"] = f"workload {workload_idx}: {d.tool_name} diverged"

        # Snapshot/restore equivalence: a restored sandbox behaves like a fork.
        forked = env.fork(base)
        results_f = [env.execute(forked, d) for d in suffix]
        for d, ra, rf in zip(suffix, results_a, results_f):
            if not ra.same_value(rf):
                failures["snapshot_restore"] = (
                    f"workload {workload_idx}: restore diverged from fork on {d.tool_name}"
                )
        if env.snapshot(forked) != env.snapshot(twin_a):
            failures["snapshot_restore"] = f"workload {workload_idx}: end states diverged"

        # Fork isolation: mutating the fork leaves the base untouched.
        if env.snapshot(base) != state_before:
            failures["fork_isolation"] = f"workload {workload_idx}: base mutated by fork activity"

        # Statelessness truthfulness on every stateless descriptor we executed.
        probe = env.restore(state_before)
        for d in suffix:
            if env.will_mutate_state(d):
                env.execute(probe, d)
                continue
            before = env.snapshot(probe)
            env.execute(probe, d)
            after = env.snapshot(probe)
            if before != after:
                failures["statelessness"] = (
                    f"workload {workload_idx}: {d.tool_name} flagged stateless but mutated state"
                )
        for handle in (base, twin_a, twin_b, forked, probe):
            env.stop(handle)

    for name in ("fork_isolation", "determinism", "snapshot_restore", "statelessness"):
        report.checks.append(ContractCheck(name, not failures[name], failures[name]))

    # Dead-handle behavior is part of the lifecycle contract.
    handle = env.start()
    env.stop(handle)
    try:
        env.execute(handle, pool[0])
        report.checks.append(ContractCheck("sandbox_dead", False, "execute on stopped handle succeeded"))
    except SandboxDeadError:
        report.checks.append(ContractCheck("sandbox_dead", True))
    return report


# -- registry --------------------------------------------------------------------

_BACKEND_FACTORIES: dict[str, Callable[..., ToolExecutionEnvironment]] = {}


def register_backend(kind: str, factory: Callable[..., ToolExecutionEnvironment]) -> None:
    _BACKEND_FACTORIES[kind] = factory


def make_backend(kind: str, **options) -> ToolExecutionEnvironment:
    try:
        factory = _BACKEND_FACTORIES[kind]
    except KeyError:
        raise KeyError(f"unknown backend kind {kind!r}; registered: {sorted(_BACKEND_FACTORIES)}")
    return factory(**options)


register_backend("filetree", FileTreeSandbox)
register_backend("readonly_query", ReadOnlyQuerySandbox)
register_backend("broken_read", BrokenReadSandbox)
