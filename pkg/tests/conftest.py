"""Shared fixtures: descriptor shorthand and the four-rollout example graph."""

from __future__ import annotations

import pytest

from tvcache.descriptors import ToolDescriptor, ToolResult
from tvcache.tcg import TaskGraph
from tvcache.snapshot import SnapshotRef

# Acceptance criteria verdicts, echoed after the run summary (the hook output
# is never swallowed by capture, unlike in-test prints).
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def desc(name: str, mutates: bool = True, **args) -> ToolDescriptor:
    return ToolDescriptor.make(name, args or {"n": name}, mutates_state=mutates)


def res(text: str, exec_ms: float = 1.0) -> ToolResult:
    return ToolResult.ok(text.encode("utf-8"), exec_ms)


def snap_ref(snapshot_id: str = "snap-1", kind: str = "filetree") -> SnapshotRef:
    return SnapshotRef(snapshot_id, 128, 5.0, kind, 1.0)


# The four parallel rollouts the worked example graph is built from:
# 1: t1 t2 t3   2: t1 t2 t3 t4   3: t1 t2 t3 t6   4: t3 t5
# with a snapshot on the t3 node at depth 3.
T = {name: desc(name) for name in ("t1", "t2", "t3", "t4", "t5", "t6", "t9")}
EXAMPLE_ROLLOUTS = [
    [T["t1"], T["t2"], T["t3"]],
    [T["t1"], T["t2"], T["t3"], T["t4"]],
    [T["t1"], T["t2"], T["t3"], T["t6"]],
    [T["t3"], T["t5"]],
]


def build_example_graph(snapshot: SnapshotRef | None = None) -> TaskGraph:
    graph = TaskGraph("example")
    snap_node = None
    for rollout in EXAMPLE_ROLLOUTS:
        for i in range(1, len(rollout) + 1):
            node_id = graph.insert(rollout[:i], res("r:" + rollout[i - 1].tool_name))
            if rollout[:i] == [T["t1"], T["t2"], T["t3"]]:
                snap_node = node_id
    if snapshot is not None:
        assert snap_node is not None
        graph.set_snapshot(snap_node, snapshot)
    return graph


@pytest.fixture
def example_graph() -> TaskGraph:
    return build_example_graph(snap_ref())


class TrieOracle:
    """Brute-force reference: a set of stored root-anchored paths."""

    def __init__(self) -> None:
        self.paths: set[tuple[str, ...]] = set()

    def insert(self, trajectory) -> None:
        key = tuple(d.key() for d in trajectory)
        for i in range(1, len(key) + 1):
            self.paths.add(key[:i])

    def node_count(self) -> int:
        return len(self.paths) + 1  # + root

    def edge_count(self) -> int:
        return len(self.paths)

    def contains(self, trajectory) -> bool:
        return tuple(d.key() for d in trajectory) in self.paths

    def longest_prefix(self, trajectory) -> int:
        key = tuple(d.key() for d in trajectory)
        best = 0
        for stored in self.paths:
            n = 0
            for a, b in zip(stored, key):
                if a != b:
                    break
                n += 1
            if n == len(stored):
                best = max(best, n)
        return best
