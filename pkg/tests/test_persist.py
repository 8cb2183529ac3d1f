"""Round-trip fidelity and damage handling for the graph file format."""

from __future__ import annotations

import io
import random

import pytest

from tvcache.errors import CorruptGraphFileError, VersionMismatchError
from tvcache.persistence import MAGIC, persist, persist_atomic, restore
from tvcache.tcg import TaskGraph

from conftest import build_example_graph, desc, res, snap_ref


def graphs_equal(a: TaskGraph, b: TaskGraph) -> bool:
    """Structural-equality oracle, written independently of the format code:
    compares node sets keyed by their root paths."""
    def snapshot_of(graph: TaskGraph) -> dict:
        paths = {}
        def rec(node_id, prefix):
            node = graph.nodes[node_id]
            entry = {
                "result": (node.result.payload, node.result.status) if node.result else None,
                "snapshot": node.snapshot.snapshot_id if node.snapshot else None,
                "hit_count": node.hit_count,
                "attachments": sorted(
                    (k, r.payload) for k, (d, r) in node.attachments.items()
                ),
            }
            paths[prefix] = entry
            for key, child in node.children.items():
                rec(child, prefix + (key,))
        rec(0, ())
        return paths

    return snapshot_of(a) == snapshot_of(b)


def round_trip(graph: TaskGraph) -> TaskGraph:
    buffer = io.BytesIO()
    persist(graph, buffer)
    buffer.seek(0)
    return restore(buffer)


def test_round_trip_empty_graph():
    graph = TaskGraph("empty", snapshot_budget=7)
    restored = round_trip(graph)
    assert graphs_equal(graph, restored)
    assert restored.task_id == "empty" and restored.snapshot_budget == 7


def test_round_trip_example_graph(example_graph):
    example_graph.lookup_exact([])  # touch stats
    restored = round_trip(example_graph)
    assert graphs_equal(example_graph, restored)
    assert restored.stats.as_dict() == example_graph.stats.as_dict()


def test_round_trip_preserves_attachments_and_resets_refs():
    graph = TaskGraph("t")
    f1 = desc("f1", mutates=True)
    s1 = desc("s1", mutates=False)
    graph.insert([f1], res("rf"), snap_ref())
    graph.attach_stateless([f1], s1, res("rs"))
    match = graph.longest_prefix_match([f1, desc("zz")])
    assert graph.nodes[match.snapshot_node_id].ref_count == 1
    restored = round_trip(graph)
    assert graphs_equal(graph, restored)
    assert all(n.ref_count == 0 for n in restored.nodes.values())
    assert restored.live_leases() == 0
    # Snapshot refs survive as identifiers.
    restored_node = restored.nodes[match.snapshot_node_id]
    assert restored_node.snapshot.snapshot_id == snap_ref().snapshot_id


def test_round_trip_random_graphs():
    rng = random.Random(5)
    alphabet = [desc(f"r{i}") for i in range(4)] + [desc(f"sl{i}", mutates=False) for i in range(2)]
    for trial in range(10):
        graph = TaskGraph(f"rand-{trial}")
        for _ in range(rng.randint(1, 25)):
            rollout = [rng.choice(alphabet[:4]) for _ in range(rng.randint(1, 6))]
            for i in range(1, len(rollout) + 1):
                graph.insert(rollout[:i], res(f"v{rng.randrange(100)}"))
        restored = round_trip(graph)
        assert graphs_equal(graph, restored)


def test_new_inserts_after_restore_do_not_collide():
    graph = round_trip(build_example_graph(snap_ref()))
    before_ids = set(graph.nodes)
    new_id = graph.insert([desc("fresh")], res("x"))
    assert new_id not in before_ids


def test_truncated_file_is_corrupt(example_graph):
    buffer = io.BytesIO()
    persist(example_graph, buffer)
    data = buffer.getvalue()
    with pytest.raises(CorruptGraphFileError) as exc_info:
        restore(io.BytesIO(data[: len(data) // 2]))
    assert exc_info.value.offset >= 0


def test_bad_header_is_version_mismatch(example_graph):
    buffer = io.BytesIO()
    persist(example_graph, buffer)
    data = b"TVC9\n" + buffer.getvalue()[5:]
    with pytest.raises(VersionMismatchError):
        restore(io.BytesIO(data))


def test_garbage_record_is_corrupt():
    data = MAGIC + b"12\nnot json here\n"
    with pytest.raises(CorruptGraphFileError):
        restore(io.BytesIO(data))


def test_missing_meta_is_corrupt():
    with pytest.raises(CorruptGraphFileError):
        restore(io.BytesIO(MAGIC))


def test_persist_atomic_file_round_trip(tmp_path, example_graph):
    target = tmp_path / "graph.tvc"
    persist_atomic(example_graph, target)
    assert not list(tmp_path.glob("*.tmp"))
    restored = restore(target)
    assert graphs_equal(example_graph, restored)


def test_persist_atomic_leaves_previous_file_on_failure(tmp_path, example_graph, monkeypatch):
    target = tmp_path / "graph.tvc"
    persist_atomic(example_graph, target)
    good = target.read_bytes()

    # Crash mid-write: the temp file dies before rename, the target survives.
    import tvcache.persistence as persist_mod

    def boom(graph, fh):
        fh.write(b"TVC1\npartial")
        raise OSError("simulated crash")

    monkeypatch.setattr(persist_mod, "_write", boom)
    with pytest.raises(OSError):
        persist_atomic(example_graph, target)
    assert target.read_bytes() == good
    restored = restore(target)
    assert graphs_equal(example_graph, restored)
