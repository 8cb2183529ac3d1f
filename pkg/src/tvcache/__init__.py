"""Stateful tool-value cache for agentic rollout execution.

Results of tool calls are memoized keyed by the full trajectory of prior
calls, so a cached value is returned only when the requesting rollout has
reached the exact sandbox state the value was computed in. Partial matches
resume from forked sandbox snapshots instead of re-executing from scratch.
"""

from .descriptors import (
    ToolDescriptor,
    ToolResult,
    Trajectory,
    canonical_args,
    encode_trajectory,
    filter_stateful,
    fnv1a64,
    trajectory_hash,
)
from .executor import (
    STATEFUL_SKIP,
    STRICT,
    LocalCache,
    RolloutReport,
    RolloutSession,
    Runtime,
    StatelessControlCache,
)
from .forkpool import FifoSemaphore, ForkPool, ForkPoolConfig
from .persistence import persist, persist_atomic, restore
from .sandbox import (
    BrokenReadSandbox,
    FileTreeSandbox,
    ReadOnlyQuerySandbox,
    SandboxHandle,
    ToolExecutionEnvironment,
    contract_suite,
    make_backend,
    register_backend,
)
from .snapshot import CostModel, SnapshotRef, SnapshotStore, should_snapshot
from .tcg import GraphRegistry, PrefixMatch, TaskGraph, TcgNode

__version__ = "0.1.0"

__all__ = [
    "ToolDescriptor",
    "ToolResult",
    "Trajectory",
    "canonical_args",
    "encode_trajectory",
    "filter_stateful",
    "fnv1a64",
    "trajectory_hash",
    "STRICT",
    "STATEFUL_SKIP",
    "LocalCache",
    "RolloutReport",
    "RolloutSession",
    "Runtime",
    "StatelessControlCache",
    "FifoSemaphore",
    "ForkPool",
    "ForkPoolConfig",
    "persist",
    "persist_atomic",
    "restore",
    "BrokenReadSandbox",
    "FileTreeSandbox",
    "ReadOnlyQuerySandbox",
    "SandboxHandle",
    "ToolExecutionEnvironment",
    "contract_suite",
    "make_backend",
    "register_backend",
    "CostModel",
    "SnapshotRef",
    "SnapshotStore",
    "should_snapshot",
    "GraphRegistry",
    "PrefixMatch",
    "TaskGraph",
    "TcgNode",
    "__version__",
]
