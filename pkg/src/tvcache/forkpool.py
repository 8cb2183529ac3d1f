"""Sandbox supply: warm clean roots, prewarmed forks of snapshot-bearing
nodes, and a rate-limited pipeline for every backend start/restore.

Creating sandboxes past a backend's saturation point destabilizes it, so all
supply flows through one FIFO counting semaphore. Prewarmed forks are built
off the critical path; a rollout that misses takes the prewarmed handle when
present (proactive hit) and restores synchronously otherwise (reactive fork).
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass

from .errors import BackendUnavailableError, UnknownSnapshotError
from .sandbox import SandboxHandle, ToolExecutionEnvironment
from .snapshot import CostModel, SnapshotRef, SnapshotStore
from .tcg import TaskGraph

logger = logging.getLogger(__name__)


class FifoSemaphore:
    """Counting semaphore with strict FIFO admission and a high-water mark."""

    def __init__(self, permits: int) -> None:
        if permits < 1:
            raise ValueError("permits must be >= 1")
        self._permits = permits
        self._lock = threading.Lock()
        self._waiters: deque[threading.Event] = deque()
        self._in_flight = 0
        self._high_water = 0

    def acquire(self) -> None:
        with self._lock:
            if self._in_flight < self._permits and not self._waiters:
                self._in_flight += 1
                self._high_water = max(self._high_water, self._in_flight)
                return
            gate = threading.Event()
            self._waiters.append(gate)
        gate.wait()

    def release(self) -> None:
        with self._lock:
            if self._waiters:
                # Hand the permit to the oldest waiter; in_flight stays put.
                self._waiters.popleft().set()
            else:
                self._in_flight -= 1

    def __enter__(self) -> "FifoSemaphore":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    @property
    def in_flight(self) -> int:
        with self._lock:
            return self._in_flight

    @property
    def high_water(self) -> int:
        with self._lock:
            return self._high_water


@dataclass(slots=True)
class ForkPoolConfig:
    root_pool_size: int = 8          # targets batch_size x rollouts_per_task warm roots
    max_concurrent_forks: int = 4    # backend saturation cap
    prewarm_enabled: bool = True
    prewarm_budget: int = 64         # per-task cap on registered prewarms
    start_retry_limit: int = 2
    replenish_fraction: float = 0.5  # refill when the warm queue drops below this

    def __post_init__(self) -> None:
        if self.max_concurrent_forks < 1:
            raise ValueError("max_concurrent_forks must be >= 1")


@dataclass(slots=True)
class PoolStats:
    proactive_hits: int = 0
    reactive_forks: int = 0
    background_instantiations: int = 0
    roots_started: int = 0
    prewarm_aborts: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "proactive_hits": self.proactive_hits,
            "reactive_forks": self.reactive_forks,
            "background_instantiations": self.background_instantiations,
            "roots_started": self.roots_started,
            "prewarm_aborts": self.prewarm_aborts,
        }


class ForkPool:
    """Supplies ready sandboxes to rollouts without paying start-up latency."""

    def __init__(
        self,
        backend: ToolExecutionEnvironment,
        store: SnapshotStore,
        config: ForkPoolConfig | None = None,
        *,
        cost_model: CostModel | None = None,
    ) -> None:
        self.backend = backend
        self.store = store
        self.config = config or ForkPoolConfig()
        self.cost_model = cost_model
        self.stats = PoolStats()
        self._limiter = FifoSemaphore(self.config.max_concurrent_forks)
        self._lock = threading.Lock()
        self._warm: deque[SandboxHandle] = deque()
        self._prewarmed: dict[tuple[str, int], SandboxHandle] = {}
        self._prewarm_inflight: set[tuple[str, int]] = set()
        self._replenishing = False
        self._closed = False
        self._workers = ThreadPoolExecutor(
            max_workers=self.config.max_concurrent_forks + 2,
            thread_name_prefix="forkpool",
        )

    # -- warm roots -----------------------------------------------------------

    def warm_roots(self, count: int) -> None:
        """Grow the warm-root queue to at least ``count`` ready sandboxes.

        Starts run in parallel through the rate limiter; the call returns
        once the queue holds the target (failed starts are retried up to the
        configured cap, then surfaced).
        """
        if count < 0:
            raise ValueError("count must be >= 0")
        with self._lock:
            missing = count - len(self._warm)
        if missing <= 0:
            return
        futures = [self._workers.submit(self._start_root) for _ in range(missing)]
        wait(futures)
        errors = [f.exception() for f in futures if f.exception() is not None]
        if errors:
            raise BackendUnavailableError(
                f"{len(errors)} of {missing} root starts failed: {errors[0]}"
            )

    def _start_root(self) -> None:
        handle = self._rate_limited_start()
        with self._lock:
            self._warm.append(handle)

    def _rate_limited_start(self) -> SandboxHandle:
        last_error: Exception | None = None
        for _ in range(self.config.start_retry_limit + 1):
            try:
                with self._limiter:
                    handle = self.backend.start()
                self.stats.roots_started += 1
                return handle
            except Exception as exc:  # backend failures are retried per sandbox
                last_error = exc
                logger.warning("root start failed, retrying: %s", exc)
        raise BackendUnavailableError(f"backend start kept failing: {last_error}")

    def acquire_root(self) -> SandboxHandle:
        """Pop a warm root (no backend call) or start one synchronously."""
        handle: SandboxHandle | None = None
        with self._lock:
            if self._warm:
                handle = self._warm.popleft()
            below_low_water = len(self._warm) < self.config.root_pool_size * self.config.replenish_fraction
            should_replenish = below_low_water and not self._replenishing and not self._closed
            if should_replenish:
                self._replenishing = True
        if should_replenish:
            self._workers.submit(self._replenish)
        if handle is not None:
            return handle
        return self._rate_limited_start()

    def _replenish(self) -> None:
        try:
            while not self._closed:
                with self._lock:
                    missing = self.config.root_pool_size - len(self._warm)
                if missing <= 0:
                    return
                try:
                    self._start_root()
                except BackendUnavailableError:
                    logger.warning("replenish aborted: backend unavailable")
                    return
        finally:
            with self._lock:
                self._replenishing = False

    # -- prewarmed forks -------------------------------------------------------

    def prewarm_for_node(self, graph: TaskGraph, node_id: int) -> None:
        """Asynchronously restore the node's snapshot into a ready handle.

        No-op when prewarming is disabled, one is already registered or being
        built, or the per-task budget is full. If the snapshot is evicted
        while the fork is in flight, the handle is discarded, never registered.
        """
        if not self.config.prewarm_enabled or self._closed:
            return
        key = (graph.task_id, node_id)
        with self._lock:
            if key in self._prewarmed or key in self._prewarm_inflight:
                return
            task_prewarms = sum(1 for (task, _) in self._prewarmed if task == graph.task_id)
            task_prewarms += sum(1 for (task, _) in self._prewarm_inflight if task == graph.task_id)
            if task_prewarms >= self.config.prewarm_budget:
                return
            self._prewarm_inflight.add(key)
        self._workers.submit(self._build_prewarm, graph, node_id, False)

    def background_instantiate(self, graph: TaskGraph, node_id: int, ref: SnapshotRef) -> None:
        """Off-critical-path restoration right after a snapshot was stored.

        Returns immediately; on completion the handle is registered as the
        node's prewarmed fork. Failures are logged and retried once.
        """
        if not self.config.prewarm_enabled or self._closed:
            return
        key = (graph.task_id, node_id)
        with self._lock:
            if key in self._prewarmed or key in self._prewarm_inflight:
                return
            self._prewarm_inflight.add(key)
        self.stats.background_instantiations += 1
        self._workers.submit(self._build_prewarm, graph, node_id, True)

    def _build_prewarm(self, graph: TaskGraph, node_id: int, retry: bool) -> None:
        key = (graph.task_id, node_id)
        try:
            node = graph.nodes.get(node_id)
            ref = node.snapshot if node is not None else None
            if ref is None:
                self.stats.prewarm_aborts += 1
                return
            try:
                with self._limiter:
                    restore_start = time.perf_counter()
                    blob = self.store.load(ref)
                    handle = self.backend.restore(blob)
                    restore_ms = (time.perf_counter() - restore_start) * 1000.0
            except UnknownSnapshotError:
                self.stats.prewarm_aborts += 1  # evicted while in flight
                return
            except Exception as exc:
                if retry:
                    logger.warning("background instantiation failed, retrying once: %s", exc)
                    with self._limiter:
                        blob = self.store.load(ref)
                        handle = self.backend.restore(blob)
                        restore_ms = None
                else:
                    raise
            if restore_ms is not None and self.cost_model is not None:
                self.cost_model.observe_restore(self.backend.backend_kind, restore_ms)
            if not self._register_prewarm(graph, node_id, handle):
                self.stats.prewarm_aborts += 1
        except Exception:
            logger.exception("prewarm for %s failed", key)
        finally:
            with self._lock:
                self._prewarm_inflight.discard(key)

    def _register_prewarm(self, graph: TaskGraph, node_id: int, handle: SandboxHandle) -> bool:
        """Install a prewarmed handle, discarding it if the node's snapshot is
        gone or another handle won the slot.

        Lock order is strictly pool-then-nothing: the graph is consulted only
        outside the pool lock, and a post-registration re-check closes the
        window against an eviction whose invalidate callback fired before we
        registered (eviction callbacks run under the graph lock and take the
        pool lock, so they must never be nested the other way around).
        """
        key = (graph.task_id, node_id)
        with self._lock:
            if self._closed or key in self._prewarmed:
                registered = False
            else:
                self._prewarmed[key] = handle
                registered = True
        if not registered:
            self.backend.stop(handle)
            return False
        if not graph.has_snapshot(node_id):
            with self._lock:
                stale = self._prewarmed.pop(key, None)
            if stale is not None:
                self.backend.stop(stale)
            return False
        return True

    def acquire_for_node(self, graph: TaskGraph, node_id: int) -> SandboxHandle:
        """Hand out a fork of the node's snapshot; caller must hold a lease.

        Prefers the prewarmed handle (proactive hit), otherwise restores on
        the critical path (reactive fork). Either way a replacement prewarm
        is scheduled, subject to the rate cap.
        """
        key = (graph.task_id, node_id)
        with self._lock:
            handle = self._prewarmed.pop(key, None)
        if handle is not None:
            self.stats.proactive_hits += 1
            self.prewarm_for_node(graph, node_id)
            return handle
        node = graph.nodes.get(node_id)
        ref = node.snapshot if node is not None else None
        if ref is None:
            # Only reachable if the caller broke the lease protocol.
            raise RuntimeError(
                f"acquire_for_node({graph.task_id}, {node_id}): snapshot missing under lease"
            )
        with self._limiter:
            restore_start = time.perf_counter()
            blob = self.store.load(ref)
            handle = self.backend.restore(blob)
            restore_ms = (time.perf_counter() - restore_start) * 1000.0
        if self.cost_model is not None:
            self.cost_model.observe_restore(self.backend.backend_kind, restore_ms)
        self.stats.reactive_forks += 1
        self.prewarm_for_node(graph, node_id)
        return handle

    def donate_prewarm(self, graph: TaskGraph, node_id: int, handle: SandboxHandle) -> bool:
        """Register a finished rollout's live sandbox as the node's prewarmed
        fork instead of stopping it. Returns False (and stops it) if a
        prewarm is already registered or the snapshot is gone."""
        return self._register_prewarm(graph, node_id, handle)

    def invalidate_node(self, task_id: str, node_id: int) -> None:
        """Drop the prewarmed fork for an evicted snapshot."""
        with self._lock:
            handle = self._prewarmed.pop((task_id, node_id), None)
        if handle is not None:
            self.backend.stop(handle)

    # -- accounting ------------------------------------------------------------

    def metrics(self) -> dict[str, int]:
        with self._lock:
            counts = {
                "warm_root_count": len(self._warm),
                "prewarmed_count": len(self._prewarmed),
                "in_flight_forks": self._limiter.in_flight,
                "fork_high_water": self._limiter.high_water,
            }
        counts.update(self.stats.as_dict())
        return counts

    def drain(self) -> None:
        """Stop every pooled sandbox (tests and shutdown)."""
        with self._lock:
            handles = list(self._warm) + list(self._prewarmed.values())
            self._warm.clear()
            self._prewarmed.clear()
        for handle in handles:
            self.backend.stop(handle)

    def close(self) -> None:
        self._closed = True
        self._workers.shutdown(wait=True)
        self.drain()
