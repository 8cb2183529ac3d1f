"""Rollout-side tool call execution against the cache.

Per tool call: exact lookup first (hit returns the cached result with no
sandbox activity), then longest-prefix match (fork the deepest snapshot in
the matched prefix and replay forward), else execute the whole trajectory in
a clean root. Once a rollout executes anything in its own sandbox it has
diverged: from then on its sandbox is authoritative and the cache is only
written, never consulted. Cache unavailability degrades to plain execution,
never to a wrong answer.
"""

from __future__ import annotations

import logging
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .descriptors import ToolDescriptor, ToolResult, filter_stateful
from .errors import (
    BackendUnavailableError,
    CacheUnavailableError,
    MalformedArgsError,
    MissingPrefixError,
    SandboxDeadError,
    UnknownLeaseError,
    UnknownSnapshotError,
)
from .forkpool import ForkPool, ForkPoolConfig
from .sandbox import SandboxHandle, ToolExecutionEnvironment
from .snapshot import CostModel, SnapshotRef, SnapshotStore, should_snapshot
from .tcg import ROOT_ID, GraphRegistry, PrefixMatch, TaskGraph

logger = logging.getLogger(__name__)

STRICT = "strict"
STATEFUL_SKIP = "stateful_skip"


class LocalCache:
    """In-process cache facade. The HTTP server exposes exactly these
    operations; keeping one shape here and on the wire stops the two executor
    implementations from drifting."""

    def __init__(self, registry: GraphRegistry) -> None:
        self.registry = registry

    def get(self, task_id: str, trajectory: list[ToolDescriptor], mode: str = STRICT) -> ToolResult | None:
        graph = self.registry.get(task_id)
        if graph is None:
            return None
        if mode == STATEFUL_SKIP:
            if not trajectory:
                return None
            return graph.lookup_stateful(trajectory[:-1], trajectory[-1])
        return graph.lookup_exact(trajectory)

    def put(
        self,
        task_id: str,
        trajectory: list[ToolDescriptor],
        result: ToolResult,
        snapshot: SnapshotRef | None = None,
        mode: str = STRICT,
    ) -> int:
        graph = self.registry.get_or_create(task_id)
        if mode == STATEFUL_SKIP:
            last = trajectory[-1]
            spine = list(filter_stateful(trajectory[:-1]))
            if last.mutates_state:
                return graph.insert(spine + [last], result, snapshot)
            return graph.attach_stateless(spine, last, result)
        return graph.insert(trajectory, result, snapshot)

    def prefix_match(self, task_id: str, trajectory: list[ToolDescriptor], mode: str = STRICT) -> PrefixMatch:
        graph = self.registry.get(task_id)
        if graph is None:
            # Like /get, matching an unknown task creates nothing.
            return PrefixMatch(matched_len=0, node_id=ROOT_ID)
        query = list(filter_stateful(trajectory)) if mode == STATEFUL_SKIP else trajectory
        return graph.longest_prefix_match(query)

    def release(self, task_id: str, lease_id: str) -> None:
        graph = self.registry.get(task_id)
        if graph is None:
            raise UnknownLeaseError(f"no graph for task {task_id!r}")
        graph.release(lease_id)


@dataclass(slots=True)
class RolloutReport:
    hits: int = 0
    misses: int = 0
    executed_tools: int = 0
    replayed_tools: int = 0
    total_tool_ms: float = 0.0
    saved_ms_estimate: float = 0.0

    def as_dict(self) -> dict:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "executed_tools": self.executed_tools,
            "replayed_tools": self.replayed_tools,
            "total_tool_ms": self.total_tool_ms,
            "saved_ms_estimate": self.saved_ms_estimate,
        }


@dataclass(frozen=True, slots=True)
class SnapshotDecision:
    """Audit record of one snapshot-policy consultation.

    ``approved`` is the policy verdict at decision time; ``stored`` is
    whether a snapshot actually landed (False when the node already carried
    one or capture failed).
    """

    task_id: str
    node_id: int | None
    tool_name: str
    exec_ms: float
    overhead_ms: float
    approved: bool
    stored: bool


@dataclass(slots=True)
class RolloutSession:
    """One rollout's view of the cache. Single-threaded by contract."""

    runtime: "Runtime"
    task_id: str
    mode: str = STRICT
    history: list[ToolDescriptor] = field(default_factory=list)
    sandbox: SandboxHandle | None = None
    hits: int = 0
    misses: int = 0
    executed_tools: int = 0
    replayed_tools: int = 0
    total_tool_ms: float = 0.0
    hit_saved_ms: float = 0.0
    lookup_ms: float = 0.0
    skipped_puts: int = 0
    last_snapshot_node: int | None = None
    ended: bool = False

    def call_tool(self, descriptor: ToolDescriptor) -> ToolResult:
        return self.runtime.call_tool(self, descriptor)

    def end(self) -> RolloutReport:
        return self.runtime.end_rollout(self)


class Runtime:
    """Composition root binding one backend to the cache, snapshot store,
    cost model, and fork pool. Many sessions may run concurrently."""

    def __init__(
        self,
        backend: ToolExecutionEnvironment,
        *,
        snapshot_root: str | Path | None = None,
        snapshot_budget: int = 64,
        snapshot_max_bytes: int | None = None,
        lease_ttl_s: float = 300.0,
        cost_model: CostModel | None = None,
        pool_config: ForkPoolConfig | None = None,
        default_mode: str = STRICT,
        store: SnapshotStore | None = None,
    ) -> None:
        if default_mode not in (STRICT, STATEFUL_SKIP):
            raise ValueError(f"unknown mode {default_mode!r}")
        self.backend = backend
        self.cost_model = cost_model if cost_model is not None else CostModel()
        if store is None:
            root = snapshot_root or tempfile.mkdtemp(prefix="tvc-snapshots-")
            store = SnapshotStore(root, max_bytes=snapshot_max_bytes, cost_model=self.cost_model)
        self.store = store
        self.registry = GraphRegistry(
            default_budget=snapshot_budget,
            lease_ttl_s=lease_ttl_s,
            on_snapshot_drop=self._on_snapshot_drop,
        )
        self.cache = LocalCache(self.registry)
        self.pool = ForkPool(backend, self.store, pool_config, cost_model=self.cost_model)
        self.default_mode = default_mode
        self.snapshot_audit: list[SnapshotDecision] = []
        self._audit_lock = threading.Lock()

    def _on_snapshot_drop(self, task_id: str, ref: SnapshotRef, node_id: int) -> None:
        # Eviction released the graph's claim: free storage and any prewarm.
        # (Runs under the owning graph's lock; the pool tolerates that order.)
        try:
            self.store.drop(ref)
        except Exception:
            logger.debug("snapshot %s already gone from store", ref.snapshot_id)
        self.pool.invalidate_node(task_id, node_id)

    def session(self, task_id: str, mode: str | None = None) -> RolloutSession:
        mode = mode or self.default_mode
        if mode not in (STRICT, STATEFUL_SKIP):
            raise ValueError(f"unknown mode {mode!r}")
        self.registry.get_or_create(task_id)
        return RolloutSession(self, task_id, mode)

    def graph(self, task_id: str) -> TaskGraph:
        return self.registry.get_or_create(task_id)

    # -- the lookup algorithm -------------------------------------------------

    def call_tool(self, session: RolloutSession, descriptor: ToolDescriptor) -> ToolResult:
        if session.ended:
            raise RuntimeError("session already ended")
        q = session.history + [descriptor]

        try:
            if session.sandbox is not None:
                # (a) Diverged: this rollout's sandbox is authoritative;
                # execute directly and publish the result, but never consult
                # the cache again within this session.
                session.misses += 1
                result = self._execute_step(session, descriptor, q, replay=False)
            else:
                try:
                    result = self._cached_call(session, descriptor, q)
                except CacheUnavailableError:
                    logger.warning("cache unavailable; failing open to direct execution")
                    result = self._fail_open(session, q)
        except (SandboxDeadError, BackendUnavailableError) as exc:
            # Infrastructure failure: surface as a tool error, cache nothing,
            # and drop the broken sandbox so the next call starts clean.
            logger.warning("sandbox failure in task %s: %s", session.task_id, exc)
            if session.sandbox is not None:
                try:
                    self.backend.stop(session.sandbox)
                except Exception:
                    pass
                session.sandbox = None
            result = ToolResult.error(f"sandbox failure: {exc}".encode("utf-8"))
        session.history.append(descriptor)
        return result

    def _cached_call(
        self, session: RolloutSession, descriptor: ToolDescriptor, q: list[ToolDescriptor]
    ) -> ToolResult:
        # (b) Exact hit: return the cached value, no sandbox exists or starts.
        start = time.perf_counter()
        try:
            cached = self.cache.get(session.task_id, q, session.mode)
        except CacheUnavailableError:
            session.misses += 1
            raise
        finally:
            session.lookup_ms += (time.perf_counter() - start) * 1000.0
        if cached is not None:
            session.hits += 1
            session.hit_saved_ms += cached.exec_ms
            return cached
        session.misses += 1

        start = time.perf_counter()
        match = self.cache.prefix_match(session.task_id, q, session.mode)
        session.lookup_ms += (time.perf_counter() - start) * 1000.0

        if session.mode == STATEFUL_SKIP:
            # State lives only in the mutating subsequence; stateless history
            # steps were answered from cache and need no re-execution.
            spine = list(filter_stateful(q))
            steps = spine if descriptor.mutates_state else spine + [descriptor]
        else:
            steps = q

        graph = self.registry.get_or_create(session.task_id)
        if match.lease_id is not None:
            # (c) Fork the deepest snapshot in the matched prefix and replay
            # everything past it (matched steps first, then the new suffix).
            assert match.snapshot_node_id is not None and match.snapshot_depth is not None
            try:
                session.sandbox = self.pool.acquire_for_node(graph, match.snapshot_node_id)
                replay_from = match.snapshot_depth
            except UnknownSnapshotError:
                # Stale ref (typically a graph restored from disk after its
                # snapshot bytes were lost): drop it so future matches skip
                # the node, and rebuild from scratch instead.
                logger.warning(
                    "snapshot bytes for node %d of task %s are gone; rebuilding",
                    match.snapshot_node_id, session.task_id,
                )
                graph.invalidate_snapshot(match.snapshot_node_id)
                session.sandbox = self.pool.acquire_root()
                replay_from = 0
            finally:
                self._release_quietly(session.task_id, match.lease_id)
        else:
            # (d) Nothing to fork: clean root, execute the full sequence.
            session.sandbox = self.pool.acquire_root()
            replay_from = 0

        result: ToolResult | None = None
        for idx in range(replay_from, len(steps)):
            replayed = idx < match.matched_len
            result = self._execute_step(session, steps[idx], steps[: idx + 1], replay=replayed)
        assert result is not None
        return result

    def _release_quietly(self, task_id: str, lease_id: str) -> None:
        try:
            self.cache.release(task_id, lease_id)
        except Exception as exc:
            # An expired or already-reclaimed lease is a leak report, not a
            # rollout failure.
            logger.warning("lease release for task %s: %s", task_id, exc)

    def _fail_open(self, session: RolloutSession, q: list[ToolDescriptor]) -> ToolResult:
        """Path (d) semantics with no cache writes: correctness without speedup."""
        if session.sandbox is None:
            session.sandbox = self.pool.acquire_root()
        if session.mode == STATEFUL_SKIP:
            spine = list(filter_stateful(q[:-1]))
            steps = spine + [q[-1]]
        else:
            steps = q
        result: ToolResult | None = None
        for step in steps:
            result = self._run_tool(session, step)
        assert result is not None
        return result

    def _run_tool(self, session: RolloutSession, descriptor: ToolDescriptor) -> ToolResult:
        assert session.sandbox is not None
        try:
            result = self.backend.execute(session.sandbox, descriptor)
        except MalformedArgsError as exc:
            # Deterministic agent-level failure: a real result, cacheable.
            result = ToolResult.error(f"malformed args: {exc}".encode("utf-8"))
        session.executed_tools += 1
        session.total_tool_ms += result.exec_ms
        return result

    def _execute_step(
        self,
        session: RolloutSession,
        descriptor: ToolDescriptor,
        trajectory: list[ToolDescriptor],
        *,
        replay: bool,
    ) -> ToolResult:
        result = self._run_tool(session, descriptor)
        if replay:
            session.replayed_tools += 1
        node_id = self._try_put(session, trajectory, result)
        session.last_snapshot_node = None
        if node_id is not None:
            self._apply_snapshot_policy(session, descriptor, result, node_id)
        return result

    def _try_put(
        self, session: RolloutSession, trajectory: list[ToolDescriptor], result: ToolResult
    ) -> int | None:
        try:
            return self.cache.put(session.task_id, trajectory, result, mode=session.mode)
        except (CacheUnavailableError, MissingPrefixError) as exc:
            # Losing an insert only loses reuse, never correctness.
            session.skipped_puts += 1
            logger.debug("skipped cache insert: %s", exc)
            return None

    def _apply_snapshot_policy(
        self,
        session: RolloutSession,
        descriptor: ToolDescriptor,
        result: ToolResult,
        node_id: int,
    ) -> None:
        # Under stateful matching only state-mutating nodes carry state worth
        # snapshotting; a stateless call's post-state is its anchor's state.
        if session.mode == STATEFUL_SKIP and not descriptor.mutates_state:
            return
        kind = self.backend.backend_kind
        overhead = self.cost_model.overhead_ms(kind)
        approved = should_snapshot(result.exec_ms, self.cost_model, kind)
        stored = False
        if approved:
            stored = self._store_snapshot(session, node_id)
        with self._audit_lock:
            self.snapshot_audit.append(
                SnapshotDecision(
                    session.task_id, node_id, descriptor.tool_name,
                    result.exec_ms, overhead, approved, stored,
                )
            )
        if stored:
            session.last_snapshot_node = node_id

    def _store_snapshot(self, session: RolloutSession, node_id: int) -> bool:
        assert session.sandbox is not None
        graph = self.registry.get_or_create(session.task_id)
        if graph.has_snapshot(node_id):
            session.last_snapshot_node = node_id
            return False
        try:
            start = time.perf_counter()
            blob = self.backend.snapshot(session.sandbox)
            serialize_ms = (time.perf_counter() - start) * 1000.0
            ref = self.store.store(blob, self.backend.backend_kind, serialize_ms=serialize_ms)
        except Exception as exc:
            logger.warning("snapshot capture failed on node %d: %s", node_id, exc)
            return False
        if not graph.set_snapshot(node_id, ref):
            # Node already had one, or the budget evicted ours immediately.
            try:
                self.store.drop(ref)
            except Exception:
                pass
            return graph.has_snapshot(node_id)
        self.pool.background_instantiate(graph, node_id, ref)
        return True

    def end_rollout(self, session: RolloutSession) -> RolloutReport:
        """Tear the session down and account for it.

        The live sandbox is donated to the fork pool when its final state was
        just snapshotted into the graph (it is exactly the prewarmed fork a
        future miss at that node needs); otherwise it stops.
        """
        if not session.ended:
            session.ended = True
            if session.sandbox is not None:
                if session.last_snapshot_node is not None:
                    # The sandbox holds exactly the state of its final,
                    # freshly snapshotted node: donate it as that node's
                    # prewarmed fork (donate stops it if the slot is taken).
                    graph = self.registry.get_or_create(session.task_id)
                    self.pool.donate_prewarm(graph, session.last_snapshot_node, session.sandbox)
                else:
                    try:
                        self.backend.stop(session.sandbox)
                    except Exception:
                        logger.debug("session sandbox already stopped")
                session.sandbox = None
        return RolloutReport(
            hits=session.hits,
            misses=session.misses,
            executed_tools=session.executed_tools,
            replayed_tools=session.replayed_tools,
            total_tool_ms=session.total_tool_ms,
            saved_ms_estimate=session.hit_saved_ms - session.lookup_ms,
        )

    def stats(self) -> dict:
        return {
            "cache": self.registry.global_stats(),
            "pool": self.pool.metrics(),
            "snapshots": {
                "count": self.store.count(),
                "bytes": self.store.stored_bytes(),
            },
        }

    def close(self) -> None:
        self.pool.close()


class StatelessControlCache:
    """Deliberately wrong control: keys on the descriptor alone, ignoring the
    trajectory. Returns stale values once state mutates; exists so tests can
    demonstrate the failure mode this system eliminates."""

    def __init__(self, backend: ToolExecutionEnvironment) -> None:
        self.backend = backend
        self._values: dict[str, ToolResult] = {}

    def call(self, handle: SandboxHandle, descriptor: ToolDescriptor) -> ToolResult:
        key = descriptor.key()
        cached = self._values.get(key)
        if cached is not None:
            return cached
        result = self.backend.execute(handle, descriptor)
        self._values[key] = result
        return result
