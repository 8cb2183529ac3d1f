"""The tool call graph: a per-task rooted tree of tool-call trajectories.

Each root-to-node path is a trajectory observed in some rollout. Nodes store
the call's result and, selectively, a snapshot of the sandbox taken right
after the call. Lookups are exact-match (cache hit) or longest-prefix-match
(resume point for a miss). Snapshot-bearing nodes are pinned by leases while
a caller forks them and are evicted by a budgeted, reuse-scored policy.

One instance is a single serialization domain: a per-graph lock orders all
mutations, so refcount changes made inside a prefix match are atomic with
respect to eviction. Distinct tasks never share state.
"""

from __future__ import annotations

import itertools
import logging
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

from .descriptors import (
    ToolDescriptor,
    ToolResult,
    Trajectory,
    filter_stateful,
)
from .errors import LeaseExpiredError, MissingPrefixError, UnknownLeaseError
from .snapshot import SnapshotRef

logger = logging.getLogger(__name__)

ROOT_ID = 0

DEFAULT_LEASE_TTL_S = 300.0


@dataclass(slots=True)
class TcgNode:
    """One cached (tool, result, optional snapshot) tuple plus tree links."""

    node_id: int
    descriptor: ToolDescriptor | None  # None only for the root
    result: ToolResult | None          # None only for the root
    depth: int
    created_at: float
    snapshot: SnapshotRef | None = None
    children: dict[str, int] = field(default_factory=dict)
    # Stateless results indexed under this node when stateful matching is on:
    # descriptor key -> (descriptor, result).
    attachments: dict[str, tuple[ToolDescriptor, ToolResult]] = field(default_factory=dict)
    ref_count: int = 0
    hit_count: int = 0


@dataclass(slots=True)
class GraphStats:
    """Aggregate counters. All fields are monotonically non-decreasing."""

    hits: int = 0
    misses: int = 0
    lpm_requests: int = 0
    lpm_hits: int = 0
    inserts: int = 0
    attachments: int = 0
    evictions: int = 0
    divergent_inserts: int = 0
    expired_leases: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "lpm_requests": self.lpm_requests,
            "lpm_hits": self.lpm_hits,
            "inserts": self.inserts,
            "attachments": self.attachments,
            "evictions": self.evictions,
            "divergent_inserts": self.divergent_inserts,
            "expired_leases": self.expired_leases,
        }


@dataclass(frozen=True, slots=True)
class PrefixMatch:
    """Outcome of a longest-prefix match.

    ``snapshot_node_id`` is the deepest node within the matched prefix that
    holds a snapshot; when present, that node's ref_count was incremented
    before this match was returned, and ``lease_id`` releases the pin.
    ``snapshot_depth`` is that node's depth (number of steps already baked
    into the snapshot), which tells the caller where replay starts.
    """

    matched_len: int
    node_id: int
    snapshot_node_id: int | None = None
    snapshot_depth: int | None = None
    snapshot: SnapshotRef | None = None
    lease_id: str | None = None


@dataclass(slots=True)
class _Lease:
    node_id: int
    expires_at: float


class TaskGraph:
    """Tool call graph for one task."""

    def __init__(
        self,
        task_id: str,
        *,
        snapshot_budget: int = 64,
        lease_ttl_s: float = DEFAULT_LEASE_TTL_S,
        clock: Callable[[], float] = time.monotonic,
        on_snapshot_drop: Callable[[str, SnapshotRef, int], None] | None = None,
    ) -> None:
        if snapshot_budget < 1:
            raise ValueError("snapshot_budget must be positive")
        self.task_id = task_id
        self.snapshot_budget = snapshot_budget
        self.lease_ttl_s = lease_ttl_s
        self._clock = clock
        self._on_snapshot_drop = on_snapshot_drop
        self._lock = threading.RLock()
        root = TcgNode(ROOT_ID, None, None, depth=0, created_at=time.time())
        self.nodes: dict[int, TcgNode] = {ROOT_ID: root}
        self._ids = itertools.count(1)
        self._leases: dict[str, _Lease] = {}
        self.stats = GraphStats()
        # Bumped on every mutation; persistence uses it for dirty tracking.
        self.version = 0

    # -- structure ---------------------------------------------------------

    @property
    def root(self) -> TcgNode:
        return self.nodes[ROOT_ID]

    def node(self, node_id: int) -> TcgNode:
        return self.nodes[node_id]

    def node_count(self) -> int:
        with self._lock:
            return len(self.nodes)

    def _walk(self, steps: Sequence[ToolDescriptor]) -> tuple[TcgNode, int]:
        """Follow ``steps`` from the root; returns (last node reached, depth)."""
        node = self.nodes[ROOT_ID]
        matched = 0
        for step in steps:
            child_id = node.children.get(step.key())
            if child_id is None:
                break
            node = self.nodes[child_id]
            matched += 1
        return node, matched

    def insert(
        self,
        trajectory: Sequence[ToolDescriptor],
        result: ToolResult,
        snapshot: SnapshotRef | None = None,
    ) -> int:
        """Insert the final step of ``trajectory`` under its prefix path.

        Callers extend the graph one step at a time, so every step but the
        last must already exist. Re-inserting an existing trajectory is
        idempotent with first-writer-wins on the payload; a divergent payload
        is counted and ignored (it signals a nondeterministic tool).
        """
        if not trajectory:
            raise ValueError("cannot insert an empty trajectory")
        with self._lock:
            parent, matched = self._walk(trajectory[:-1])
            if matched != len(trajectory) - 1:
                raise MissingPrefixError(
                    f"prefix missing at step {matched} of {len(trajectory) - 1}"
                )
            last = trajectory[-1]
            existing_id = parent.children.get(last.key())
            if existing_id is not None:
                node = self.nodes[existing_id]
                assert node.result is not None
                if not node.result.same_value(result):
                    self.stats.divergent_inserts += 1
                if snapshot is not None and node.snapshot is None:
                    self._set_snapshot_locked(node, snapshot)
                return existing_id
            node_id = next(self._ids)
            node = TcgNode(
                node_id,
                last,
                result,
                depth=parent.depth + 1,
                created_at=time.time(),
                snapshot=None,
            )
            self.nodes[node_id] = node
            parent.children[last.key()] = node_id
            self.stats.inserts += 1
            self.version += 1
            if snapshot is not None:
                self._set_snapshot_locked(node, snapshot)
            return node_id

    def set_snapshot(self, node_id: int, snapshot: SnapshotRef) -> bool:
        """Attach a snapshot to a node (no-op if it already has one).

        Returns True when the snapshot is on the node after the call, which
        can be False immediately if attaching it pushed the graph over budget
        and the new snapshot itself was the eviction victim.
        """
        with self._lock:
            node = self.nodes[node_id]
            if node.snapshot is not None:
                return node.snapshot.snapshot_id == snapshot.snapshot_id
            self._set_snapshot_locked(node, snapshot)
            return node.snapshot is not None and node.snapshot.snapshot_id == snapshot.snapshot_id

    def _set_snapshot_locked(self, node: TcgNode, snapshot: SnapshotRef) -> None:
        node.snapshot = snapshot
        self.version += 1
        if self.snapshot_count() > self.snapshot_budget:
            self.evict()

    def has_snapshot(self, node_id: int) -> bool:
        with self._lock:
            node = self.nodes.get(node_id)
            return node is not None and node.snapshot is not None

    def invalidate_snapshot(self, node_id: int) -> None:
        """Clear a snapshot whose bytes turned out to be gone (validity is
        only re-checked lazily, e.g. after a restore from disk)."""
        with self._lock:
            node = self.nodes.get(node_id)
            if node is not None and node.snapshot is not None:
                node.snapshot = None
                self.version += 1

    # -- lookups -----------------------------------------------------------

    def lookup_exact(self, trajectory: Sequence[ToolDescriptor]) -> ToolResult | None:
        """Full-trajectory match. The empty trajectory is defined as a miss
        (the root stores no result). Never mutates structure."""
        with self._lock:
            if trajectory:
                node, matched = self._walk(trajectory)
                if matched == len(trajectory):
                    node.hit_count += 1
                    self.stats.hits += 1
                    return node.result
            self.stats.misses += 1
            return None

    def longest_prefix_match(self, trajectory: Sequence[ToolDescriptor]) -> PrefixMatch:
        """Longest root-anchored path equal to a prefix of ``trajectory``.

        When any node on the matched path holds a snapshot, the deepest such
        node is pinned: its ref_count is incremented and a lease minted, so
        eviction cannot drop the snapshot before the caller forks it.
        """
        with self._lock:
            self.stats.lpm_requests += 1
            node = self.nodes[ROOT_ID]
            matched = 0
            snap_node: TcgNode | None = None
            for step in trajectory:
                child_id = node.children.get(step.key())
                if child_id is None:
                    break
                node = self.nodes[child_id]
                matched += 1
                if node.snapshot is not None:
                    snap_node = node
            if snap_node is None:
                return PrefixMatch(matched_len=matched, node_id=node.node_id)
            snap_node.ref_count += 1
            lease_id = uuid.uuid4().hex
            self._leases[lease_id] = _Lease(snap_node.node_id, self._clock() + self.lease_ttl_s)
            self.stats.lpm_hits += 1
            return PrefixMatch(
                matched_len=matched,
                node_id=node.node_id,
                snapshot_node_id=snap_node.node_id,
                snapshot_depth=snap_node.depth,
                snapshot=snap_node.snapshot,
                lease_id=lease_id,
            )

    def lookup_stateful(
        self, trajectory: Sequence[ToolDescriptor], target: ToolDescriptor
    ) -> ToolResult | None:
        """Exact lookup under stateful prefix matching.

        The anchor is the node reached by the state-mutating subsequence of
        ``trajectory``. A stateless target hits if it is attached anywhere
        under that anchor (position within the stateless suffix is
        irrelevant); a stateful target descends as an ordinary child.
        """
        with self._lock:
            spine = filter_stateful(trajectory)
            anchor, matched = self._walk(spine)
            if matched != len(spine):
                self.stats.misses += 1
                return None
            if target.mutates_state:
                child_id = anchor.children.get(target.key())
                if child_id is None:
                    self.stats.misses += 1
                    return None
                child = self.nodes[child_id]
                child.hit_count += 1
                self.stats.hits += 1
                return child.result
            hit = anchor.attachments.get(target.key())
            if hit is None:
                self.stats.misses += 1
                return None
            anchor.hit_count += 1
            self.stats.hits += 1
            return hit[1]

    def attach_stateless(
        self,
        stateful_prefix: Sequence[ToolDescriptor],
        descriptor: ToolDescriptor,
        result: ToolResult,
    ) -> int:
        """Store a stateless call's result under the end of its stateful prefix.

        An empty prefix anchors at the root (stateless calls before any
        mutation observe the initial state). Idempotent on repeat.
        """
        if descriptor.mutates_state:
            raise ValueError("attach_stateless requires a stateless descriptor")
        if any(not d.mutates_state for d in stateful_prefix):
            raise ValueError("stateful_prefix must contain only state-mutating steps")
        with self._lock:
            anchor, matched = self._walk(stateful_prefix)
            if matched != len(stateful_prefix):
                raise MissingPrefixError(
                    f"stateful prefix missing at step {matched} of {len(stateful_prefix)}"
                )
            key = descriptor.key()
            if key not in anchor.attachments:
                anchor.attachments[key] = (descriptor, result)
                self.stats.attachments += 1
                self.version += 1
            return anchor.node_id

    # -- leases and refcounts ------------------------------------------------

    def release(self, lease_id: str) -> None:
        """Decrement the leased node's ref_count and consume the lease."""
        with self._lock:
            lease = self._leases.get(lease_id)
            if lease is None:
                raise UnknownLeaseError(f"unknown or already released lease {lease_id!r}")
            del self._leases[lease_id]
            self._decref(lease.node_id)
            if self._clock() > lease.expires_at:
                # The refcount reclaim above stands; tell the caller they held
                # the pin longer than the TTL guaranteed.
                raise LeaseExpiredError(f"lease {lease_id!r} outlived its TTL")

    def expire_leases(self) -> int:
        """Reclaim refcounts of leases past their TTL (crashed clients)."""
        now = self._clock()
        with self._lock:
            expired = [lid for lid, lease in self._leases.items() if now > lease.expires_at]
            for lid in expired:
                lease = self._leases.pop(lid)
                self._decref(lease.node_id)
                self.stats.expired_leases += 1
                logger.warning(
                    "task %s: lease %s on node %d expired; refcount leaked by client",
                    self.task_id, lid, lease.node_id,
                )
            return len(expired)

    def _decref(self, node_id: int) -> None:
        node = self.nodes.get(node_id)
        if node is None:
            return
        if node.ref_count <= 0:
            raise AssertionError(f"ref_count underflow on node {node_id}")
        node.ref_count -= 1

    def live_leases(self) -> int:
        with self._lock:
            return len(self._leases)

    # -- eviction ------------------------------------------------------------

    def snapshot_count(self) -> int:
        return sum(1 for n in self.nodes.values() if n.snapshot is not None)

    @staticmethod
    def _score(node: TcgNode) -> float:
        """Reuse score: shallow, branchy, frequently hit snapshots survive."""
        return (node.hit_count + 1) * (len(node.children) + 1) / (node.depth + 1)

    def _subtree_refs(self) -> dict[int, int]:
        """Sum of ref_counts over each node's subtree (single post-order pass)."""
        totals: dict[int, int] = {}
        stack: list[tuple[int, bool]] = [(ROOT_ID, False)]
        while stack:
            node_id, expanded = stack.pop()
            node = self.nodes[node_id]
            if expanded:
                totals[node_id] = node.ref_count + sum(
                    totals[c] for c in node.children.values()
                )
            else:
                stack.append((node_id, True))
                for child_id in node.children.values():
                    stack.append((child_id, False))
        return totals

    def evict(self) -> list[int]:
        """Drop lowest-scoring snapshots until the budget holds.

        Only snapshots whose entire subtree carries zero references are
        candidates. Results are never dropped, only snapshots. When every
        over-budget snapshot is pinned, eviction defers and returns [].
        """
        with self._lock:
            over = self.snapshot_count() - self.snapshot_budget
            if over <= 0:
                return []
            refs = self._subtree_refs()
            candidates = [
                n for n in self.nodes.values()
                if n.snapshot is not None and refs[n.node_id] == 0
            ]
            candidates.sort(key=lambda n: (self._score(n), n.created_at, n.node_id))
            evicted: list[int] = []
            for node in candidates[:over]:
                ref = node.snapshot
                assert ref is not None
                node.snapshot = None
                evicted.append(node.node_id)
                self.stats.evictions += 1
                self.version += 1
                if self._on_snapshot_drop is not None:
                    try:
                        self._on_snapshot_drop(self.task_id, ref, node.node_id)
                    except Exception:
                        logger.exception("snapshot drop callback failed for %s", ref.snapshot_id)
            if len(evicted) < over:
                logger.warning(
                    "task %s: snapshot budget unreachable; %d over-budget snapshots "
                    "are referenced, eviction deferred",
                    self.task_id, over - len(evicted),
                )
            return evicted

    # -- introspection ---------------------------------------------------------

    def iter_bfs(self) -> Iterator[tuple[TcgNode, int | None]]:
        """Yield (node, parent_id) in breadth-first order, children sorted by key."""
        with self._lock:
            queue: deque[tuple[int, int | None]] = deque([(ROOT_ID, None)])
            while queue:
                node_id, parent_id = queue.popleft()
                node = self.nodes[node_id]
                yield node, parent_id
                for key in sorted(node.children):
                    queue.append((node.children[key], node_id))

    def trajectories(self) -> list[Trajectory]:
        """All root-anchored paths of length >= 1 (test/debug helper)."""
        out: list[Trajectory] = []

        def rec(node: TcgNode, prefix: list[ToolDescriptor]) -> None:
            for key in sorted(node.children):
                child = self.nodes[node.children[key]]
                assert child.descriptor is not None
                path = prefix + [child.descriptor]
                out.append(tuple(path))
                rec(child, path)

        with self._lock:
            rec(self.root, [])
        return out

    def export_dot(self) -> str:
        """Deterministic DOT rendering. Equal graph content gives equal bytes."""
        lines = [
            "digraph tcg {",
            '  rankdir=TB;',
            '  node [shape=box, fontname="monospace", fontsize=10];',
        ]
        edges: list[str] = []
        for node, parent_id in self.iter_bfs():
            if node.node_id == ROOT_ID:
                lines.append(f'  n{ROOT_ID} [label="root", shape=circle];')
            else:
                assert node.descriptor is not None
                args = node.descriptor.args_canonical
                if len(args) > 24:
                    args = args[:21] + "..."
                label = _dot_escape(
                    f"{node.descriptor.tool_name} {args}\\nhits={node.hit_count}"
                )
                style = ", style=filled, fillcolor=lightgrey" if node.snapshot is not None else ""
                lines.append(f'  n{node.node_id} [label="{label}"{style}];')
            if parent_id is not None:
                edges.append(f"  n{parent_id} -> n{node.node_id};")
            for key in sorted(node.attachments):
                desc, _ = node.attachments[key]
                aid = f"n{node.node_id}_a{_stable_suffix(key)}"
                label = _dot_escape(desc.tool_name)
                lines.append(f'  {aid} [label="{label}", shape=ellipse, style=dashed];')
                edges.append(f"  n{node.node_id} -> {aid} [style=dashed];")
        lines.extend(edges)
        lines.append("}")
        return "\n".join(lines) + "\n"


def _dot_escape(text: str) -> str:
    return text.replace('"', '\\"')


def _stable_suffix(key: str) -> str:
    from .descriptors import fnv1a64

    return f"{fnv1a64(key):016x}"


class GraphRegistry:
    """All task graphs known to one cache instance, created on first use."""

    def __init__(
        self,
        *,
        default_budget: int = 64,
        lease_ttl_s: float = DEFAULT_LEASE_TTL_S,
        clock: Callable[[], float] = time.monotonic,
        on_snapshot_drop: Callable[[str, SnapshotRef, int], None] | None = None,
    ) -> None:
        self._graphs: dict[str, TaskGraph] = {}
        self._lock = threading.Lock()
        self._default_budget = default_budget
        self._lease_ttl_s = lease_ttl_s
        self._clock = clock
        self._on_snapshot_drop = on_snapshot_drop

    def get(self, task_id: str) -> TaskGraph | None:
        with self._lock:
            return self._graphs.get(task_id)

    def get_or_create(self, task_id: str) -> TaskGraph:
        with self._lock:
            graph = self._graphs.get(task_id)
            if graph is None:
                graph = TaskGraph(
                    task_id,
                    snapshot_budget=self._default_budget,
                    lease_ttl_s=self._lease_ttl_s,
                    clock=self._clock,
                    on_snapshot_drop=self._on_snapshot_drop,
                )
                self._graphs[task_id] = graph
            return graph

    def adopt(self, graph: TaskGraph) -> None:
        """Install a restored graph (used by server startup restore)."""
        with self._lock:
            self._graphs[graph.task_id] = graph

    def task_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._graphs)

    def graphs(self) -> list[TaskGraph]:
        with self._lock:
            return list(self._graphs.values())

    def global_stats(self) -> dict[str, int]:
        totals: dict[str, int] = GraphStats().as_dict()
        for graph in self.graphs():
            for key, value in graph.stats.as_dict().items():
                totals[key] += value
        totals["tasks"] = len(self.graphs())
        totals["nodes"] = sum(g.node_count() for g in self.graphs())
        totals["snapshots"] = sum(g.snapshot_count() for g in self.graphs())
        return totals
