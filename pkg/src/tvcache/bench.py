"""Synthetic rollout workloads and the replay harness that measures what the
cache buys: hit rates by epoch, per-tool-call time, rollout/batch wall time,
and server latency under open-loop load.

Rollouts within a task share a common tool-call spine and diverge from it
with a per-step probability, which controls how much redundancy the cache
can exploit. The cached and uncached runs replay identical traces (same
seed), and every cached result is gated bitwise against a fresh-execution
oracle: a benchmark that returns wrong values aborts instead of reporting
a speedup.
"""

from __future__ import annotations

import http.client
import json
import logging
import random
import statistics
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .descriptors import ToolDescriptor, ToolResult, fnv1a64
from .errors import TvcError
from .executor import Runtime, STRICT, STATEFUL_SKIP
from .forkpool import ForkPoolConfig
from .sandbox import FileTreeSandbox
from .server import descriptor_to_wire, result_to_wire, shard_for_task
from .snapshot import CostModel

logger = logging.getLogger(__name__)


class BenchCorrectnessError(TvcError):
    """A cached result diverged from fresh execution; the benchmark aborts."""


# -- distributions ----------------------------------------------------------------


def sample_length(dist: dict, rng: random.Random) -> int:
    kind = dist.get("kind", "fixed")
    if kind == "fixed":
        return int(dist["value"])
    if kind == "uniform":
        return rng.randint(int(dist["lo"]), int(dist["hi"]))
    raise ValueError(f"unknown length distribution {kind!r}")


def sample_cost(dist: dict, rng: random.Random) -> float:
    kind = dist.get("kind", "fixed")
    if kind == "fixed":
        return float(dist["value"])
    if kind == "mix":
        # choices: [[probability, cost_ms], ...]
        roll = rng.random()
        acc = 0.0
        for prob, cost in dist["choices"]:
            acc += prob
            if roll < acc:
                return float(cost)
        return float(dist["choices"][-1][1])
    if kind == "uniform":
        return rng.uniform(float(dist["lo"]), float(dist["hi"]))
    raise ValueError(f"unknown cost distribution {kind!r}")


@dataclass(slots=True)
class WorkloadSpec:
    tasks: int = 4
    rollouts_per_task: int = 8
    epochs: int = 1
    trajectory_len: dict = field(default_factory=lambda: {"kind": "fixed", "value": 8})
    branch_prob: float = 0.15
    # Divergent steps draw from a finite per-position variant pool of this
    # size, so popular side branches repeat across rollouts and epochs and
    # the graph's growth translates into rising hit rates.
    branch_fanout: int = 3
    tool_cost: dict = field(default_factory=lambda: {"kind": "fixed", "value": 0.0})
    stateless_frac: float = 0.5
    seed: int = 0
    snapshot_overhead_ms: float = 0.0
    snapshot_budget: int = 64
    mode: str = STRICT

    def __post_init__(self) -> None:
        if not (0.0 <= self.branch_prob <= 1.0):
            raise ValueError("branch_prob must be in [0, 1]")
        if not (0.0 <= self.stateless_frac <= 1.0):
            raise ValueError("stateless_frac must be in [0, 1]")
        if self.branch_fanout < 1:
            raise ValueError("branch_fanout must be >= 1")
        if self.mode not in (STRICT, STATEFUL_SKIP):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_json(self) -> dict:
        return {
            "tasks": self.tasks,
            "rollouts_per_task": self.rollouts_per_task,
            "epochs": self.epochs,
            "trajectory_len": self.trajectory_len,
            "branch_prob": self.branch_prob,
            "branch_fanout": self.branch_fanout,
            "tool_cost": self.tool_cost,
            "stateless_frac": self.stateless_frac,
            "seed": self.seed,
            "snapshot_overhead_ms": self.snapshot_overhead_ms,
            "snapshot_budget": self.snapshot_budget,
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, data: dict) -> "WorkloadSpec":
        return cls(**data)


def _rng(*parts: Any) -> random.Random:
    # Salted string hashing would break cross-process determinism, so derive
    # integer seeds with the package's own stable hash.
    return random.Random(fnv1a64("/".join(str(p) for p in parts)))


def _sample_step(spec: WorkloadSpec, rng: random.Random, tag: str) -> ToolDescriptor:
    # The tag keys each sampled step uniquely (the backend ignores it), so a
    # divergent draw is a genuinely different tool call even when the cost
    # distribution is degenerate.
    if rng.random() < spec.stateless_frac:
        cost = sample_cost(spec.tool_cost, rng)
        return ToolDescriptor.make("sleep_ms", {"ms": cost, "tag": tag}, mutates_state=False)
    path = f"f{rng.randrange(4)}"
    token = f"{tag}:{rng.randrange(1 << 30):08x}"
    return ToolDescriptor.make("write", {"path": path, "content": token}, mutates_state=True)


def generate(spec: WorkloadSpec) -> dict[str, list[list[list[ToolDescriptor]]]]:
    """Deterministic traces: ``{task_id: [epoch][rollout] -> [descriptor]}``.

    Rollouts follow the task's spine until their first divergence draw
    (per-step probability ``branch_prob``), then commit to one of
    ``branch_fanout`` alternative continuations and follow it to the end, the
    way an agent that abandons the common strategy sticks with a recurring
    alternative one. Each rollout slot keeps its trajectory length and
    divergence depth across epochs and re-samples only which branch it
    commits to (paired sampling: epoch-over-epoch hit-rate changes then
    reflect graph growth rather than a re-rolled divergence-depth mix).
    """
    traces: dict[str, list[list[list[ToolDescriptor]]]] = {}
    max_len = _max_len(spec)
    fanout = spec.branch_fanout
    for task_idx in range(spec.tasks):
        task_id = f"task-{spec.seed}-{task_idx}"
        spine_rng = _rng(spec.seed, "spine", task_idx)
        # variants[i][0] is the spine step at position i; variants[i][v >= 1]
        # is the step alternative continuation v takes at that position.
        variants: list[list[ToolDescriptor]] = [
            [_sample_step(spec, spine_rng, f"s{task_idx}.{i}.{v}") for v in range(fanout + 1)]
            for i in range(max_len)
        ]
        spine = [position[0] for position in variants]
        slots = []
        for rollout_idx in range(spec.rollouts_per_task):
            slot_rng = _rng(spec.seed, task_idx, "slot", rollout_idx)
            length = min(sample_length(spec.trajectory_len, slot_rng), max_len)
            diverge_at = None
            for i in range(length):
                if slot_rng.random() < spec.branch_prob:
                    diverge_at = i
                    break
            slots.append((length, diverge_at))
        epochs = []
        for epoch in range(spec.epochs):
            rollouts = []
            for rollout_idx, (length, diverge_at) in enumerate(slots):
                steps = list(spine[:length])
                if diverge_at is not None:
                    rng = _rng(spec.seed, task_idx, epoch, rollout_idx)
                    branch = rng.randrange(1, fanout + 1)
                    steps[diverge_at:] = [
                        variants[i][branch] for i in range(diverge_at, length)
                    ]
                rollouts.append(steps)
            epochs.append(rollouts)
        traces[task_id] = epochs
    return traces


def _max_len(spec: WorkloadSpec) -> int:
    dist = spec.trajectory_len
    if dist.get("kind", "fixed") == "fixed":
        return int(dist["value"])
    return int(dist["hi"])


# -- replay ------------------------------------------------------------------------


class _NominalCostFileTree(FileTreeSandbox):
    """Oracle twin: identical values and state transitions, but sleep_ms
    reports its nominal duration instead of actually waiting. Payloads stay
    bitwise comparable while oracle passes run in microseconds."""

    def execute(self, handle, descriptor):  # type: ignore[override]
        if descriptor.tool_name == "sleep_ms":
            ms = float(descriptor.args().get("ms", 0.0))
            self._handles.get(handle)  # still enforces liveness
            return ToolResult(b"", "ok", ms)
        return super().execute(handle, descriptor)


@dataclass(slots=True)
class BenchReport:
    spec: dict = field(default_factory=dict)
    cached: bool | None = None
    hit_rate_by_epoch: list[float] = field(default_factory=list)
    median_tool_ms_cached: float | None = None
    median_tool_ms_uncached: float | None = None
    speedup: float | None = None
    rollout_wall_ms: list[float] = field(default_factory=list)
    batch_wall_ms: list[float] = field(default_factory=list)
    p95_get_latency_by_rps: list[dict] = field(default_factory=list)
    call_count: int = 0
    total_hits: int = 0
    total_misses: int = 0
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "spec": self.spec,
            "cached": self.cached,
            "hit_rate_by_epoch": self.hit_rate_by_epoch,
            "median_tool_ms_cached": self.median_tool_ms_cached,
            "median_tool_ms_uncached": self.median_tool_ms_uncached,
            "speedup": self.speedup,
            "rollout_wall_ms": self.rollout_wall_ms,
            "batch_wall_ms": self.batch_wall_ms,
            "p95_get_latency_by_rps": self.p95_get_latency_by_rps,
            "call_count": self.call_count,
            "total_hits": self.total_hits,
            "total_misses": self.total_misses,
            "notes": self.notes,
        }

    @classmethod
    def from_json(cls, data: dict) -> "BenchReport":
        return cls(**data)


def compute_oracle(spec: WorkloadSpec, traces=None) -> dict[tuple, ToolResult]:
    """Fresh full-trajectory execution of every rollout on the no-wait twin.

    Keyed by (task_id, epoch, rollout, call index). This is the ground truth
    the cached run is gated against.
    """
    traces = traces if traces is not None else generate(spec)
    backend = _NominalCostFileTree()
    oracle: dict[tuple, ToolResult] = {}
    for task_id, epochs in traces.items():
        for epoch, rollouts in enumerate(epochs):
            for ridx, steps in enumerate(rollouts):
                handle = backend.start()
                for cidx, step in enumerate(steps):
                    oracle[(task_id, epoch, ridx, cidx)] = backend.execute(handle, step)
                backend.stop(handle)
    return oracle


def run(
    spec: WorkloadSpec,
    cached: bool,
    *,
    traces=None,
    oracle: dict[tuple, ToolResult] | None = None,
    runtime: Runtime | None = None,
    task_concurrency: int | None = None,
) -> BenchReport:
    """Replay the workload through the cache (cached=True) or via direct
    sandbox execution, with identical traces either way.

    Tasks run concurrently; rollouts within a task run sequentially, the
    order the hit-rate arithmetic is defined over. In cached runs every
    returned value is compared bitwise against the oracle.
    """
    traces = traces if traces is not None else generate(spec)
    if cached and oracle is None:
        oracle = compute_oracle(spec, traces)

    backend = FileTreeSandbox(snapshot_cost_ms=spec.snapshot_overhead_ms)
    own_runtime = False
    if cached and runtime is None:
        own_runtime = True
        runtime = Runtime(
            backend,
            snapshot_budget=spec.snapshot_budget,
            default_mode=spec.mode,
            pool_config=ForkPoolConfig(root_pool_size=spec.rollouts_per_task,
                                       max_concurrent_forks=4),
        )
        if spec.snapshot_overhead_ms:
            calibrate_cost_model(runtime.cost_model, backend)

    report = BenchReport(spec=spec.to_json(), cached=cached)
    call_ms: list[float] = []
    epoch_hits = [0] * spec.epochs
    epoch_misses = [0] * spec.epochs
    rollout_walls: list[float] = []
    task_epoch_walls: dict[str, list[float]] = {t: [0.0] * spec.epochs for t in traces}
    lock = threading.Lock()

    def run_task(task_id: str) -> None:
        epochs = traces[task_id]
        for epoch, rollouts in enumerate(epochs):
            epoch_wall = 0.0
            for ridx, steps in enumerate(rollouts):
                t_roll = time.perf_counter()
                local_ms: list[float] = []
                if cached:
                    assert runtime is not None and oracle is not None
                    session = runtime.session(task_id, spec.mode)
                    for cidx, step in enumerate(steps):
                        t0 = time.perf_counter()
                        result = session.call_tool(step)
                        local_ms.append((time.perf_counter() - t0) * 1000.0)
                        expected = oracle[(task_id, epoch, ridx, cidx)]
                        if not result.same_value(expected):
                            raise BenchCorrectnessError(
                                f"value divergence at {task_id} epoch {epoch} "
                                f"rollout {ridx} call {cidx}: "
                                f"{result.status}:{result.payload!r} != "
                                f"{expected.status}:{expected.payload!r}"
                            )
                    rollout_report = session.end()
                    with lock:
                        epoch_hits[epoch] += rollout_report.hits
                        epoch_misses[epoch] += rollout_report.misses
                else:
                    handle = backend.start()
                    for step in steps:
                        t0 = time.perf_counter()
                        backend.execute(handle, step)
                        local_ms.append((time.perf_counter() - t0) * 1000.0)
                    backend.stop(handle)
                    with lock:
                        epoch_misses[epoch] += len(steps)
                wall = (time.perf_counter() - t_roll) * 1000.0
                epoch_wall += wall
                with lock:
                    call_ms.extend(local_ms)
                    rollout_walls.append(wall)
            task_epoch_walls[task_id][epoch] = epoch_wall

    workers = task_concurrency or min(len(traces), 16)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_task, task_id) for task_id in traces]
        for future in futures:
            future.result()

    if own_runtime:
        assert runtime is not None
        runtime.close()

    report.call_count = len(call_ms)
    report.total_hits = sum(epoch_hits)
    report.total_misses = sum(epoch_misses)
    for epoch in range(spec.epochs):
        total = epoch_hits[epoch] + epoch_misses[epoch]
        report.hit_rate_by_epoch.append(epoch_hits[epoch] / total if total else 0.0)
    median = statistics.median(call_ms) if call_ms else 0.0
    if cached:
        report.median_tool_ms_cached = median
    else:
        report.median_tool_ms_uncached = median
    report.rollout_wall_ms = rollout_walls
    report.batch_wall_ms = [
        max(task_epoch_walls[t][e] for t in traces) for e in range(spec.epochs)
    ]
    return report


def calibrate_cost_model(model: CostModel, backend: FileTreeSandbox) -> dict[str, float]:
    """Measure one real snapshot and restore and seed the cold-start prior
    with the observed cost, so the policy threshold reflects this backend
    instead of the generic pessimistic default."""
    handle = backend.start()
    t0 = time.perf_counter()
    blob = backend.snapshot(handle)
    serialize_ms = (time.perf_counter() - t0) * 1000.0
    t0 = time.perf_counter()
    restored = backend.restore(blob)
    restore_ms = (time.perf_counter() - t0) * 1000.0
    backend.stop(handle)
    backend.stop(restored)
    model.cold_start_ms = (serialize_ms + restore_ms) / 2.0
    return {"serialize_ms": serialize_ms, "restore_ms": restore_ms}


def measure_hit_cost_ms(samples: int = 200) -> float:
    """Median wall time of a warm in-process cache hit (lookup calibration)."""
    backend = _NominalCostFileTree()
    runtime = Runtime(backend, pool_config=ForkPoolConfig(root_pool_size=1))
    steps = [
        ToolDescriptor.make("write", {"path": "c", "content": str(i)}, mutates_state=True)
        for i in range(4)
    ]
    warm = runtime.session("calibration")
    for step in steps:
        warm.call_tool(step)
    warm.end()
    times: list[float] = []
    for _ in range(samples):
        session = runtime.session("calibration")
        for step in steps:
            t0 = time.perf_counter()
            session.call_tool(step)
            times.append((time.perf_counter() - t0) * 1000.0)
        session.end()
    runtime.close()
    return statistics.median(times)


def predict(
    spec: WorkloadSpec,
    *,
    hit_cost_ms: float,
    serialize_ms: float,
    restore_ms: float,
    traces=None,
) -> dict[str, float]:
    """Closed-form expectation of the paired-run medians.

    The decision structure (which calls hit, what gets replayed, what gets
    snapshotted) is simulated by running the real cache logic over a no-wait
    twin backend that reports nominal costs; per-call times are then priced
    analytically from the cost mix: hits cost the calibrated lookup, executed
    steps cost their nominal duration, stored snapshots add the serialize
    cost, and reactive forks add the restore cost.
    """
    traces = traces if traces is not None else generate(spec)
    backend = _NominalCostFileTree()
    model = CostModel(cold_start_ms=(serialize_ms + restore_ms) / 2.0)
    runtime = Runtime(
        backend,
        snapshot_budget=spec.snapshot_budget,
        default_mode=spec.mode,
        cost_model=model,
        pool_config=ForkPoolConfig(root_pool_size=4, prewarm_enabled=False),
    )

    predicted_cached: list[float] = []
    predicted_uncached: list[float] = []
    hits = 0
    calls = 0
    for task_id, epochs in traces.items():
        for rollouts in epochs:
            for steps in rollouts:
                session = runtime.session(task_id, spec.mode)
                for step in steps:
                    before_exec = session.executed_tools
                    before_tool_ms = session.total_tool_ms
                    before_hits = session.hits
                    before_snaps = runtime.store.count()
                    before_reactive = runtime.pool.stats.reactive_forks
                    session.call_tool(step)
                    calls += 1
                    nominal = float(step.args().get("ms", 0.0)) if step.tool_name == "sleep_ms" else 0.0
                    predicted_uncached.append(max(nominal, 0.001))
                    if session.hits > before_hits:
                        hits += 1
                        predicted_cached.append(hit_cost_ms)
                        continue
                    cost = session.total_tool_ms - before_tool_ms
                    cost += serialize_ms * (runtime.store.count() - before_snaps)
                    cost += restore_ms * (runtime.pool.stats.reactive_forks - before_reactive)
                    if session.executed_tools == before_exec:
                        cost = max(cost, hit_cost_ms)
                    predicted_cached.append(max(cost, 0.001))
                session.end()
    runtime.close()
    return {
        "cached_median_ms": statistics.median(predicted_cached),
        "uncached_median_ms": statistics.median(predicted_uncached),
        "speedup": statistics.median(predicted_uncached) / statistics.median(predicted_cached),
        "hit_rate": hits / calls if calls else 0.0,
    }


def merge_reports(uncached: BenchReport, cached: BenchReport) -> BenchReport:
    """Fold a paired run into one report with the speedup ratio filled in."""
    merged = BenchReport(
        spec=cached.spec,
        cached=None,
        hit_rate_by_epoch=cached.hit_rate_by_epoch,
        median_tool_ms_cached=cached.median_tool_ms_cached,
        median_tool_ms_uncached=uncached.median_tool_ms_uncached,
        rollout_wall_ms=cached.rollout_wall_ms,
        batch_wall_ms=cached.batch_wall_ms,
        call_count=cached.call_count,
        total_hits=cached.total_hits,
        total_misses=cached.total_misses,
        notes={
            "uncached_rollout_wall_ms": uncached.rollout_wall_ms,
            "uncached_batch_wall_ms": uncached.batch_wall_ms,
        },
    )
    if merged.median_tool_ms_cached and merged.median_tool_ms_uncached:
        merged.speedup = merged.median_tool_ms_uncached / merged.median_tool_ms_cached
    return merged


# -- open-loop server load ---------------------------------------------------------


@dataclass(slots=True)
class SweepCell:
    shards: int
    offered_rps: float
    achieved_rps: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    errors: int
    saturated: bool

    def as_dict(self) -> dict:
        return {
            "shards": self.shards,
            "offered_rps": self.offered_rps,
            "achieved_rps": self.achieved_rps,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "p99_ms": self.p99_ms,
            "errors": self.errors,
            "saturated": self.saturated,
        }


def _percentile(sorted_values: Sequence[float], q: float) -> float:
    if not sorted_values:
        return float("nan")
    idx = min(len(sorted_values) - 1, max(0, int(round(q * (len(sorted_values) - 1)))))
    return sorted_values[idx]


def start_server_process(port: int, *, extra_args: Iterable[str] = ()) -> subprocess.Popen:
    """Spawn one cache shard as a child process and wait until it serves."""
    cmd = [
        sys.executable, "-m", "tvcache", "serve",
        "--listen", f"127.0.0.1:{port}",
        "--request-log", "off",
        *extra_args,
    ]
    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    deadline = time.time() + 15.0
    while time.time() < deadline:
        try:
            conn = http.client.HTTPConnection("127.0.0.1", port, timeout=1.0)
            conn.request("GET", "/healthz")
            if conn.getresponse().status == 200:
                conn.close()
                return proc
        except OSError:
            time.sleep(0.05)
    proc.kill()
    raise TvcError(f"server on port {port} did not become healthy")


def build_corpus(size: int, *, tasks: int = 64, seed: int = 7) -> list[tuple[str, list[dict]]]:
    """``size`` distinct trajectory keys spread over ``tasks`` chains."""
    corpus: list[tuple[str, list[dict]]] = []
    per_task = max(1, size // tasks)
    for t in range(tasks):
        task_id = f"corpus-{seed}-{t}"
        rng = _rng(seed, "corpus", t)
        chain: list[dict] = []
        for i in range(per_task):
            if len(corpus) >= size:
                break
            step = ToolDescriptor.make(
                "write",
                {"path": f"k{i}", "content": f"{rng.randrange(1 << 30):08x}"},
                mutates_state=True,
            )
            chain = chain + [descriptor_to_wire(step)]
            corpus.append((task_id, chain))
        if len(corpus) >= size:
            break
    return corpus


def preload_corpus(ports: list[int], corpus: list[tuple[str, list[dict]]], shard_count: int) -> None:
    conns = {p: http.client.HTTPConnection("127.0.0.1", p, timeout=10.0) for p in ports}
    payload_result = result_to_wire(ToolResult.ok(b"v"))
    try:
        for task_id, chain in corpus:
            port = ports[shard_for_task(task_id, shard_count)]
            body = json.dumps(
                {"task_id": task_id, "trajectory": chain, "result": payload_result}
            )
            conn = conns[port]
            conn.request("PUT", "/put", body, {"Content-Type": "application/json"})
            response = conn.getresponse()
            response.read()
            if response.status != 200:
                raise TvcError(f"corpus preload failed: {response.status}")
    finally:
        for conn in conns.values():
            conn.close()


def open_loop_get_load(
    ports: list[int],
    corpus: list[tuple[str, list[dict]]],
    *,
    rps: float,
    duration_s: float,
    shard_count: int,
    workers: int | None = None,
    seed: int = 11,
) -> tuple[list[float], int, int]:
    """Fixed-rate GET load; returns (latencies_ms, sent, errors).

    Request i is scheduled at start + i/rps regardless of completions; a
    behind-schedule worker fires immediately, so sustained lag shows up as
    achieved throughput below the offered rate rather than a silent slowdown.
    """
    workers = workers or min(64, max(8, int(rps // 25)))
    bodies = []
    rng = random.Random(seed)
    for task_id, chain in corpus:
        depth = rng.randint(1, len(chain))
        bodies.append(
            (
                shard_for_task(task_id, shard_count),
                json.dumps({"task_id": task_id, "trajectory": chain[:depth]}),
            )
        )
    schedule_lock = threading.Lock()
    next_index = 0
    latencies: list[float] = []
    errors = 0
    start = time.perf_counter()
    deadline = start + duration_s

    def worker() -> None:
        nonlocal next_index, errors
        conns = {p: http.client.HTTPConnection("127.0.0.1", p, timeout=5.0) for p in set(ports)}
        local_lat: list[float] = []
        local_err = 0
        while True:
            with schedule_lock:
                i = next_index
                next_index += 1
            due = start + i / rps
            now = time.perf_counter()
            if due >= deadline:
                break
            if due > now:
                time.sleep(due - now)
            shard, body = bodies[i % len(bodies)]
            conn = conns[ports[shard]]
            t0 = time.perf_counter()
            try:
                conn.request("POST", "/get", body, {"Content-Type": "application/json"})
                response = conn.getresponse()
                response.read()
                if response.status != 200:
                    local_err += 1
            except OSError:
                local_err += 1
                conn.close()
            local_lat.append((time.perf_counter() - t0) * 1000.0)
        for conn in conns.values():
            conn.close()
        with schedule_lock:
            latencies.extend(local_lat)
            errors += local_err

    threads = [threading.Thread(target=worker) for _ in range(workers)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    return latencies, len(latencies), errors


def latency_sweep(
    rps_levels: Sequence[float],
    shard_counts: Sequence[int],
    key_corpus_size: int = 8000,
    *,
    duration_s: float = 10.0,
    base_port: int = 8200,
) -> list[SweepCell]:
    """Per (shards, rps): achieved throughput and latency percentiles from
    open-loop load against freshly spawned shard processes."""
    cells: list[SweepCell] = []
    corpus = build_corpus(key_corpus_size)
    port_cursor = base_port
    for shards in shard_counts:
        ports = [port_cursor + i for i in range(shards)]
        port_cursor += shards
        procs = [start_server_process(p) for p in ports]
        try:
            preload_corpus(ports, corpus, shards)
            for rps in rps_levels:
                latencies, sent, errors = open_loop_get_load(
                    ports, corpus, rps=rps, duration_s=duration_s, shard_count=shards
                )
                latencies.sort()
                achieved = sent / duration_s
                cells.append(
                    SweepCell(
                        shards=shards,
                        offered_rps=rps,
                        achieved_rps=achieved,
                        p50_ms=_percentile(latencies, 0.50),
                        p95_ms=_percentile(latencies, 0.95),
                        p99_ms=_percentile(latencies, 0.99),
                        errors=errors,
                        saturated=achieved < 0.95 * rps,
                    )
                )
        finally:
            for proc in procs:
                proc.terminate()
            for proc in procs:
                proc.wait(timeout=10)
    return cells


def sweep_to_csv(cells: Sequence[SweepCell], path: str | Path) -> None:
    lines = ["shards,offered_rps,achieved_rps,p50_ms,p95_ms,p99_ms,errors,saturated"]
    for cell in cells:
        d = cell.as_dict()
        lines.append(
            f"{d['shards']},{d['offered_rps']},{d['achieved_rps']:.2f},"
            f"{d['p50_ms']:.3f},{d['p95_ms']:.3f},{d['p99_ms']:.3f},"
            f"{d['errors']},{int(d['saturated'])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
