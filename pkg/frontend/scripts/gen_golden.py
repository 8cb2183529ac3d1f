#!/usr/bin/env python3
"""Generate the golden conformance fixtures for the client SDK.

Produces two files under tests/fixtures/:
  golden_cases.json  - 200 scripted rollout cases (tools, declared costs,
                       policy thresholds, matching mode)
  golden_trace.jsonl - the reference executor's decision log for those cases,
                       one canonical JSON line per tool call

The client replays the cases against a live cache server and must reproduce
the decision log byte-for-byte. Tool costs are declared per tool rather than
measured so snapshot-policy decisions are reproducible across processes.
"""

from __future__ import annotations

import json
import random
import sys
from pathlib import Path

from tvcache.descriptors import ToolDescriptor
from tvcache.executor import Runtime, STATEFUL_SKIP, STRICT
from tvcache.forkpool import ForkPoolConfig
from tvcache.sandbox import FileTreeSandbox, SandboxHandle
from tvcache.snapshot import CostModel

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

PATHS = ["p0", "p1", "p2"]


class DeclaredCostFileTree(FileTreeSandbox):
    """Reference backend with declared per-tool exec_ms instead of wall time,
    mirroring the client harness's environment."""

    def __init__(self, costs: dict[str, float]):
        super().__init__()
        self.costs = costs

    def execute(self, handle: SandboxHandle, descriptor: ToolDescriptor):
        result = super().execute(handle, descriptor)
        declared = self.costs.get(descriptor.tool_name, 0.0)
        return type(result)(result.payload, result.status, declared)


class RecordingCache:
    def __init__(self, inner):
        self.inner = inner
        self.last_match = None

    def get(self, *args, **kwargs):
        return self.inner.get(*args, **kwargs)

    def put(self, *args, **kwargs):
        return self.inner.put(*args, **kwargs)

    def prefix_match(self, *args, **kwargs):
        match = self.inner.prefix_match(*args, **kwargs)
        self.last_match = match
        return match

    def release(self, *args, **kwargs):
        return self.inner.release(*args, **kwargs)


def sample_step(rng: random.Random, tag: str) -> dict:
    roll = rng.random()
    if roll < 0.35:
        return {"tool": "write",
                "args": {"path": rng.choice(PATHS), "content": f"{tag}v{rng.randrange(4)}"},
                "mutates_state": True}
    if roll < 0.50:
        return {"tool": "append",
                "args": {"path": rng.choice(PATHS), "content": f"+{rng.randrange(3)}"},
                "mutates_state": True}
    if roll < 0.70:
        return {"tool": "read", "args": {"path": rng.choice(PATHS)}, "mutates_state": False}
    if roll < 0.85:
        return {"tool": "ls", "args": {}, "mutates_state": False}
    return {"tool": "rm", "args": {"path": rng.choice(PATHS)}, "mutates_state": True}


def build_cases(count: int = 200, seed: int = 2024) -> list[dict]:
    rng = random.Random(seed)
    cases = []
    for case_idx in range(count):
        mode = STATEFUL_SKIP if case_idx % 3 == 2 else STRICT
        threshold = rng.choice([100.0, 300.0])
        costs = {
            "write": 30.0,
            "append": threshold * 2 + 100.0,  # always snapshot-worthy
            "read": 5.0,
            "ls": 5.0,
            "rm": 30.0,
        }
        base = [sample_step(rng, f"c{case_idx}.{i}") for i in range(rng.randint(2, 6))]
        rollouts = [base]
        # A replay of the base (exact hits) or a prefix-sharing variant.
        if rng.random() < 0.5:
            rollouts.append(list(base))
        else:
            keep = rng.randint(1, len(base))
            variant = base[:keep] + [
                sample_step(rng, f"c{case_idx}.d{i}") for i in range(rng.randint(1, 3))
            ]
            rollouts.append(variant)
        # Stateful-skip cases get a stateless reordering of the base when
        # its tail has two stateless steps; otherwise a second variant.
        if mode == STATEFUL_SKIP and rng.random() < 0.7:
            reordered = list(base)
            stateless_positions = [i for i, s in enumerate(reordered)
                                   if not s["mutates_state"]]
            if len(stateless_positions) >= 2:
                a, b = stateless_positions[-2], stateless_positions[-1]
                reordered[a], reordered[b] = reordered[b], reordered[a]
            rollouts.append(reordered)
        elif rng.random() < 0.4:
            keep = rng.randint(0, len(base))
            rollouts.append(base[:keep] + [sample_step(rng, f"c{case_idx}.e{i}")
                                           for i in range(rng.randint(1, 2))])
        cases.append({
            "case": case_idx,
            "task_id": f"golden-{case_idx}",
            "mode": mode,
            "cold_start_ms": threshold / 2.0,
            "ema_alpha": 1e-9,
            "costs": costs,
            "rollouts": rollouts,
        })
    return cases


def descriptor_of(step: dict) -> ToolDescriptor:
    return ToolDescriptor.make(step["tool"], step["args"], mutates_state=step["mutates_state"])


def run_reference(cases: list[dict]) -> list[str]:
    lines: list[str] = []
    for case in cases:
        backend = DeclaredCostFileTree(case["costs"])
        runtime = Runtime(
            backend,
            cost_model=CostModel(ema_alpha=case["ema_alpha"],
                                 cold_start_ms=case["cold_start_ms"]),
            pool_config=ForkPoolConfig(root_pool_size=1, prewarm_enabled=False),
        )
        recorder = RecordingCache(runtime.cache)
        runtime.cache = recorder
        for rollout_idx, rollout in enumerate(case["rollouts"]):
            session = runtime.session(case["task_id"], case["mode"])
            for call_idx, step in enumerate(rollout):
                diverged_before = session.sandbox is not None
                hits_before = session.hits
                executed_before = session.executed_tools
                recorder.last_match = None
                result = session.call_tool(descriptor_of(step))
                executed = session.executed_tools - executed_before
                if session.hits > hits_before:
                    action, matched, depth = "hit", None, None
                elif diverged_before:
                    action, matched, depth = "direct", None, None
                elif recorder.last_match is not None and recorder.last_match.lease_id:
                    action = "fork_replay"
                    matched = recorder.last_match.matched_len
                    depth = recorder.last_match.snapshot_depth
                else:
                    action = "fresh"
                    matched = recorder.last_match.matched_len if recorder.last_match else None
                    depth = None
                lines.append(json.dumps(
                    {
                        "case": case["case"],
                        "rollout": rollout_idx,
                        "call": call_idx,
                        "action": action,
                        "matched_len": matched,
                        "snapshot_depth": depth,
                        "executed": executed,
                        "status": result.status,
                        "result_b64": __import__("base64").b64encode(result.payload).decode(),
                    },
                    sort_keys=True, separators=(",", ":"),
                ))
            session.end()
        runtime.close()
    return lines


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    cases = build_cases()
    trace = run_reference(cases)
    (FIXTURES / "golden_cases.json").write_text(
        json.dumps(cases, indent=1, sort_keys=True), encoding="utf-8"
    )
    (FIXTURES / "golden_trace.jsonl").write_text("\n".join(trace) + "\n", encoding="utf-8")
    print(f"wrote {len(cases)} cases, {len(trace)} trace lines to {FIXTURES}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
