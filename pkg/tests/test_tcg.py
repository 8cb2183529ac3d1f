"""Graph structure, lookups, stateful matching, leases, and eviction."""

from __future__ import annotations

import random

import pytest

from tvcache.descriptors import ToolResult, filter_stateful
from tvcache.errors import LeaseExpiredError, MissingPrefixError, UnknownLeaseError
from tvcache.tcg import ROOT_ID, TaskGraph

from conftest import (
    EXAMPLE_ROLLOUTS,
    T,
    TrieOracle,
    build_example_graph,
    desc,
    res,
    snap_ref,
)


# -- insert ------------------------------------------------------------------


def test_insert_chain_with_snapshot_matches_example():
    graph = TaskGraph("t")
    graph.insert([T["t1"]], res("r1"))
    graph.insert([T["t1"], T["t2"]], res("r2"))
    n3 = graph.insert([T["t1"], T["t2"], T["t3"]], res("r3"), snap_ref())
    assert graph.node_count() == 4  # chain of 3 + root
    assert graph.nodes[n3].snapshot is not None
    assert [n.snapshot is not None for n in graph.nodes.values()].count(True) == 1


def test_insert_is_idempotent():
    graph = TaskGraph("t")
    first = graph.insert([T["t1"]], res("r1"))
    second = graph.insert([T["t1"]], res("r1"))
    assert first == second
    assert graph.node_count() == 2
    assert graph.stats.inserts == 1


def test_divergent_reinsert_keeps_first_value():
    graph = TaskGraph("t")
    graph.insert([T["t1"]], res("first"))
    graph.insert([T["t1"]], res("second"))
    assert graph.lookup_exact([T["t1"]]).payload == b"first"
    assert graph.stats.divergent_inserts == 1


def test_insert_requires_existing_prefix():
    graph = TaskGraph("t")
    with pytest.raises(MissingPrefixError):
        graph.insert([T["t1"], T["t2"]], res("r"))
    with pytest.raises(ValueError):
        graph.insert([], res("r"))


def test_interleaved_example_rollouts_match_trie_oracle():
    oracle = TrieOracle()
    graph = TaskGraph("t")
    # Interleave inserts across the four rollouts step by step.
    max_len = max(len(r) for r in EXAMPLE_ROLLOUTS)
    for depth in range(1, max_len + 1):
        for rollout in EXAMPLE_ROLLOUTS:
            if len(rollout) >= depth:
                graph.insert(rollout[:depth], res("x"))
                oracle.insert(rollout[:depth])
    assert graph.node_count() == oracle.node_count()
    edges = sum(len(n.children) for n in graph.nodes.values())
    assert edges == oracle.edge_count()
    # The t3 descriptor names two distinct nodes (depth 1 and depth 3).
    t3_nodes = [
        n for n in graph.nodes.values()
        if n.descriptor is not None and n.descriptor.tool_name == "t3"
    ]
    assert len(t3_nodes) == 2
    assert graph.node_count() == 8 and edges == 7


# -- exact lookup ---------------------------------------------------------------


def test_lookup_hit_after_first_rollout(example_graph):
    result = example_graph.lookup_exact([T["t1"], T["t2"], T["t3"]])
    assert result is not None and result.payload == b"r:t3"
    assert example_graph.stats.hits == 1


def test_lookup_empty_trajectory_is_miss(example_graph):
    assert example_graph.lookup_exact([]) is None
    assert example_graph.stats.misses == 1


def test_lookup_membership_matches_brute_force():
    graph = TaskGraph("t")
    oracle = TrieOracle()
    for rollout in EXAMPLE_ROLLOUTS[:2]:
        for i in range(1, len(rollout) + 1):
            graph.insert(rollout[:i], res("x"))
            oracle.insert(rollout[:i])
    probe = [T["t1"], T["t2"], T["t6"]]
    assert graph.lookup_exact(probe) is None
    assert not oracle.contains(probe)
    # After rollout 3 is added, the same probe hits.
    rollout3 = EXAMPLE_ROLLOUTS[2]
    for i in range(1, len(rollout3) + 1):
        graph.insert(rollout3[:i], res("x"))
        oracle.insert(rollout3[:i])
    probe_hit = [T["t1"], T["t2"], T["t3"], T["t6"]]
    assert (graph.lookup_exact(probe_hit) is not None) == oracle.contains(probe_hit)


def test_lookup_never_mutates_structure(example_graph):
    before = example_graph.node_count()
    example_graph.lookup_exact([T["t9"], T["t1"]])
    example_graph.lookup_exact([T["t1"], T["t2"], T["t3"], T["t9"]])
    assert example_graph.node_count() == before


def test_hit_count_increments_only_on_terminal(example_graph):
    example_graph.lookup_exact([T["t1"], T["t2"], T["t3"]])
    by_tool = {
        n.descriptor.tool_name: n
        for n in example_graph.nodes.values()
        if n.descriptor is not None and n.depth <= 3 and n.descriptor.tool_name in ("t1", "t2")
    }
    assert all(n.hit_count == 0 for n in by_tool.values())


# -- longest prefix match ---------------------------------------------------------


def test_lpm_finds_deepest_snapshot(example_graph):
    q = [T["t1"], T["t2"], T["t3"], T["t4"], T["t9"]]
    match = example_graph.longest_prefix_match(q)
    assert match.matched_len == 4
    assert example_graph.nodes[match.node_id].descriptor.tool_name == "t4"
    snap_node = example_graph.nodes[match.snapshot_node_id]
    assert snap_node.descriptor.tool_name == "t3" and snap_node.depth == 3
    assert match.snapshot_depth == 3
    assert match.lease_id is not None
    assert snap_node.ref_count == 1


def test_lpm_disjoint_query(example_graph):
    match = example_graph.longest_prefix_match([T["t9"], T["t1"]])
    assert match.matched_len == 0
    assert match.node_id == ROOT_ID
    assert match.snapshot_node_id is None and match.lease_id is None


def test_lpm_matches_brute_force_on_random_tries():
    rng = random.Random(42)
    alphabet = [desc(f"a{i}") for i in range(5)]
    for trial in range(30):
        graph = TaskGraph(f"t{trial}")
        oracle = TrieOracle()
        for _ in range(rng.randint(1, 15)):
            rollout = [rng.choice(alphabet) for _ in range(rng.randint(1, 8))]
            for i in range(1, len(rollout) + 1):
                graph.insert(rollout[:i], res("x"))
                oracle.insert(rollout[:i])
        for _ in range(20):
            query = [rng.choice(alphabet) for _ in range(rng.randint(0, 10))]
            match = graph.longest_prefix_match(query)
            assert match.matched_len == oracle.longest_prefix(query)
            if match.lease_id is not None:
                graph.release(match.lease_id)


def test_lpm_maximality_on_ten_thousand_node_graph():
    rng = random.Random(1234)
    alphabet = [desc(f"m{i}") for i in range(6)]
    graph = TaskGraph("big")
    oracle = TrieOracle()
    while graph.node_count() < 10_000:
        rollout = [rng.choice(alphabet) for _ in range(rng.randint(4, 14))]
        for i in range(1, len(rollout) + 1):
            graph.insert(rollout[:i], res("x"))
        oracle.insert(rollout)
    for _ in range(50):
        query = [rng.choice(alphabet) for _ in range(rng.randint(0, 16))]
        match = graph.longest_prefix_match(query)
        # Maximality: no stored path longer than matched_len prefixes the query.
        assert match.matched_len == oracle.longest_prefix(query)


def test_distinct_tasks_never_contend():
    # One task's serialization domain being held must not delay lookups on
    # another task (the process-per-shard design relies on this in-process).
    import threading
    import time as time_mod

    graph_a = TaskGraph("a")
    graph_b = TaskGraph("b")
    graph_b.insert([T["t1"]], res("r"))
    release_hold = threading.Event()
    holding = threading.Event()

    def hold_a_lock():
        with graph_a._lock:
            holding.set()
            release_hold.wait(2.0)

    holder = threading.Thread(target=hold_a_lock)
    holder.start()
    assert holding.wait(1.0)
    start = time_mod.perf_counter()
    assert graph_b.lookup_exact([T["t1"]]) is not None
    elapsed_ms = (time_mod.perf_counter() - start) * 1000.0
    release_hold.set()
    holder.join()
    assert elapsed_ms < 100.0  # nowhere near the 2 s the other task's lock is held


# -- stateful matching -------------------------------------------------------------


def make_stateful_alphabet():
    f1 = desc("f1", mutates=True)
    f2 = desc("f2", mutates=True)
    s1 = desc("s1", mutates=False)
    s2 = desc("s2", mutates=False)
    return f1, f2, s1, s2


def test_filter_stateful_example():
    f1, f2, s1, s2 = make_stateful_alphabet()
    assert filter_stateful([f1, s1, f2, s2]) == (f1, f2)


def test_reordered_stateless_suffixes_share_a_filter():
    f1, f2, s1, s2 = make_stateful_alphabet()
    a = [f1, f2, s1, s2]
    b = [f1, f2, s2, s1]
    assert filter_stateful(a) == filter_stateful(b) == (f1, f2)


def test_attach_and_lookup_stateful_reordering():
    # Rollout 1 executes f1 f2 s1 s2; rollout 2's s2-then-s1 both hit because
    # the stateless results are indexed as children of f2.
    f1, f2, s1, s2 = make_stateful_alphabet()
    graph = TaskGraph("t")
    graph.insert([f1], res("rf1"))
    graph.insert([f1, f2], res("rf2"))
    anchor_a = graph.attach_stateless([f1, f2], s1, res("rs1"))
    anchor_b = graph.attach_stateless([f1, f2], s2, res("rs2"))
    assert anchor_a == anchor_b
    f2_node = graph.nodes[anchor_a]
    assert f2_node.descriptor.tool_name == "f2"
    assert len(f2_node.attachments) == 2

    hit_s2_first = graph.lookup_stateful([f1, f2], s2)
    hit_s1_second = graph.lookup_stateful([f1, f2, s2], s1)
    assert hit_s2_first.payload == b"rs2"
    assert hit_s1_second.payload == b"rs1"


def test_lookup_stateful_descends_on_stateful_target():
    f1, f2, s1, _ = make_stateful_alphabet()
    graph = TaskGraph("t")
    graph.insert([f1], res("rf1"))
    graph.insert([f1, f2], res("rf2"))
    assert graph.lookup_stateful([f1, s1], f2).payload == b"rf2"
    f3 = desc("f3", mutates=True)
    assert graph.lookup_stateful([f1, s1], f3) is None


def test_attach_idempotent_and_under_root():
    f1, _, s1, _ = make_stateful_alphabet()
    graph = TaskGraph("t")
    node = graph.attach_stateless([], s1, res("early"))
    again = graph.attach_stateless([], s1, res("early"))
    assert node == again == ROOT_ID
    assert len(graph.root.attachments) == 1
    # Stateless calls before any mutation observe the untouched initial state.
    assert graph.lookup_stateful([], s1).payload == b"early"
    with pytest.raises(MissingPrefixError):
        graph.attach_stateless([f1], s1, res("x"))
    with pytest.raises(ValueError):
        graph.attach_stateless([s1], s1, res("x"))
    with pytest.raises(ValueError):
        graph.attach_stateless([], f1, res("x"))


# -- leases / refcounts --------------------------------------------------------------


def test_release_decrements_and_consumes(example_graph):
    match = example_graph.longest_prefix_match([T["t1"], T["t2"], T["t3"], T["t9"]])
    node = example_graph.nodes[match.snapshot_node_id]
    assert node.ref_count == 1
    example_graph.release(match.lease_id)
    assert node.ref_count == 0
    with pytest.raises(UnknownLeaseError):
        example_graph.release(match.lease_id)
    assert node.ref_count == 0


def test_concurrent_leases_act_as_counter(example_graph):
    # Linearizable counter oracle: interleave match/release randomly and
    # track the expected count by hand.
    rng = random.Random(7)
    q = [T["t1"], T["t2"], T["t3"], T["t9"]]
    probe = example_graph.longest_prefix_match(q)
    node_id = probe.snapshot_node_id
    example_graph.release(probe.lease_id)
    open_leases: list[str] = []
    expected = 0
    for _ in range(200):
        if open_leases and rng.random() < 0.5:
            example_graph.release(open_leases.pop())
            expected -= 1
        else:
            match = example_graph.longest_prefix_match(q)
            open_leases.append(match.lease_id)
            expected += 1
        assert example_graph.nodes[node_id].ref_count == expected
    for lease in open_leases:
        example_graph.release(lease)
    assert example_graph.nodes[node_id].ref_count == 0


def test_lease_ids_unique_at_scale(example_graph):
    q = [T["t1"], T["t2"], T["t3"], T["t9"]]
    seen = set()
    for _ in range(100_000):
        match = example_graph.longest_prefix_match(q)
        assert match.lease_id not in seen
        seen.add(match.lease_id)
        example_graph.release(match.lease_id)
    assert len(seen) == 100_000


def test_lease_ttl_expiry_reclaims_refcount():
    clock_now = [0.0]
    graph = TaskGraph("t", lease_ttl_s=10.0, clock=lambda: clock_now[0])
    graph.insert([T["t1"]], res("r"), snap_ref())
    match = graph.longest_prefix_match([T["t1"], T["t2"]])
    node = graph.nodes[match.snapshot_node_id]
    assert node.ref_count == 1
    clock_now[0] = 11.0
    assert graph.expire_leases() == 1
    assert node.ref_count == 0
    assert graph.stats.expired_leases == 1
    with pytest.raises(UnknownLeaseError):
        graph.release(match.lease_id)


def test_release_after_ttl_reports_expiry():
    clock_now = [0.0]
    graph = TaskGraph("t", lease_ttl_s=10.0, clock=lambda: clock_now[0])
    graph.insert([T["t1"]], res("r"), snap_ref())
    match = graph.longest_prefix_match([T["t1"], T["t2"]])
    clock_now[0] = 11.0
    with pytest.raises(LeaseExpiredError):
        graph.release(match.lease_id)
    # The refcount was still reclaimed exactly once.
    assert graph.nodes[match.snapshot_node_id].ref_count == 0


# -- eviction -----------------------------------------------------------------------


def test_evict_by_ascending_score():
    # Scores from the formula (hits+1)(children+1)/(depth+1):
    #   a: depth 9, 0 hits, 0 children -> (1)(1)/10  = 0.1
    #   b: depth 1, 9 hits, 0 children -> (10)(1)/2  = 5.0
    #   c: depth 1, 5 hits, 0 children -> (6)(1)/2   = 3.0
    graph = TaskGraph("t", snapshot_budget=2)
    chain = [desc(f"chain{i}") for i in range(9)]
    for i in range(1, 10):
        graph.insert(chain[:i], res("x"))
    node_a = next(n for n in graph.nodes.values() if n.depth == 9)
    node_b = graph.nodes[graph.insert([desc("b")], res("x"))]
    node_c = graph.nodes[graph.insert([desc("c")], res("x"))]
    node_b.hit_count = 9
    node_c.hit_count = 5
    assert TaskGraph._score(node_a) == pytest.approx(0.1)
    assert TaskGraph._score(node_b) == pytest.approx(5.0)
    assert TaskGraph._score(node_c) == pytest.approx(3.0)
    graph.set_snapshot(node_b.node_id, snap_ref("sb"))
    graph.set_snapshot(node_c.node_id, snap_ref("sc"))
    assert graph.evict() == []  # exactly at budget
    graph.set_snapshot(node_a.node_id, snap_ref("sa"))
    # One over budget; a has the lowest score and zero refs -> only a goes.
    assert node_a.snapshot is None
    assert node_b.snapshot is not None and node_c.snapshot is not None
    assert graph.stats.evictions == 1


def test_evict_skips_referenced_node_even_at_lowest_score():
    graph = TaskGraph("t", snapshot_budget=2)
    a = graph.insert([desc("a")], res("x"))
    b = graph.insert([desc("b")], res("x"))
    c = graph.insert([desc("c")], res("x"))
    graph.nodes[b].hit_count = 9
    graph.nodes[c].hit_count = 5
    graph.set_snapshot(a, snap_ref("sa"))
    graph.set_snapshot(b, snap_ref("sb"))
    # Pin a (lowest score) with a lease, then push over budget.
    match = graph.longest_prefix_match([graph.nodes[a].descriptor, T["t9"]])
    assert match.snapshot_node_id == a
    graph.set_snapshot(c, snap_ref("sc"))
    assert graph.nodes[a].snapshot is not None  # pinned survives despite lowest score
    assert graph.nodes[c].snapshot is None      # lowest unpinned score got evicted
    graph.release(match.lease_id)


def test_evict_protects_whole_subtree_of_referenced_node():
    # Lease on a child pins the ancestor's snapshot too: only subtrees with
    # zero total references are eviction candidates.
    graph = TaskGraph("t", snapshot_budget=1)
    a = graph.insert([desc("a")], res("x"))
    ab = graph.insert([desc("a"), desc("b")], res("x"))
    graph.set_snapshot(ab, snap_ref("sab"))
    match = graph.longest_prefix_match([desc("a"), desc("b"), T["t9"]])
    assert match.snapshot_node_id == ab
    graph.set_snapshot(a, snap_ref("sa"))  # over budget by one
    assert graph.evict() == []  # a's subtree holds ab's reference; ab is leased
    assert graph.nodes[a].snapshot is not None and graph.nodes[ab].snapshot is not None
    graph.release(match.lease_id)
    evicted = graph.evict()
    assert evicted == [ab]  # score(ab)=1/3 < score(a)=(1)(2)/2
    assert graph.snapshot_count() == 1


def test_evict_noop_under_budget(example_graph):
    assert example_graph.evict() == []


def test_budget_unreachable_defers():
    graph = TaskGraph("t", snapshot_budget=2)
    a = graph.insert([desc("a")], res("x"))
    b = graph.insert([desc("b")], res("x"))
    graph.set_snapshot(a, snap_ref("sa"))
    graph.set_snapshot(b, snap_ref("sb"))
    lease_a = graph.longest_prefix_match([desc("a"), T["t9"]]).lease_id
    lease_b = graph.longest_prefix_match([desc("b"), T["t9"]]).lease_id
    # An operator tightening the budget can leave every snapshot pinned.
    graph.snapshot_budget = 1
    assert graph.snapshot_count() == 2
    assert graph.evict() == []  # deferred: everything over budget is referenced
    assert graph.snapshot_count() == 2
    graph.release(lease_a)
    graph.release(lease_b)
    evicted = graph.evict()
    assert len(evicted) == 1 and graph.snapshot_count() == 1


def test_snapshot_drop_callback_fires():
    dropped = []
    graph = TaskGraph("t", snapshot_budget=1,
                      on_snapshot_drop=lambda task, ref, node_id: dropped.append(ref.snapshot_id))
    a = graph.insert([desc("a")], res("x"), snap_ref("sa"))
    graph.nodes[a].hit_count = 3
    graph.insert([desc("b")], res("x"), snap_ref("sb"))
    assert dropped == ["sb"] or dropped == ["sa"]
    assert graph.snapshot_count() == 1


# -- invariants ------------------------------------------------------------------------


def test_prefix_closure_on_random_graphs():
    rng = random.Random(3)
    alphabet = [desc(f"p{i}") for i in range(4)]
    graph = TaskGraph("t")
    for _ in range(40):
        rollout = [rng.choice(alphabet) for _ in range(rng.randint(1, 7))]
        for i in range(1, len(rollout) + 1):
            graph.insert(rollout[:i], res("x"))
    for path in graph.trajectories():
        for i in range(1, len(path)):
            assert graph.lookup_exact(list(path[:i])) is not None


def test_tree_depth_and_parent_invariants(example_graph):
    child_ids = [cid for n in example_graph.nodes.values() for cid in n.children.values()]
    assert len(child_ids) == len(set(child_ids))  # single parent each
    for node in example_graph.nodes.values():
        for child_id in node.children.values():
            assert example_graph.nodes[child_id].depth == node.depth + 1


def test_hit_soundness_random_ops():
    rng = random.Random(11)
    alphabet = [desc(f"h{i}") for i in range(3)]
    graph = TaskGraph("t")
    inserted: dict[tuple, bytes] = {}
    for step in range(300):
        rollout = tuple(rng.choice(alphabet) for _ in range(rng.randint(1, 5)))
        if rng.random() < 0.5:
            for i in range(1, len(rollout) + 1):
                payload = f"v{step}:{i}".encode()
                key = tuple(d.key() for d in rollout[:i])
                graph.insert(list(rollout[:i]), ToolResult(payload, "ok", 0.0))
                inserted.setdefault(key, payload)  # first writer wins
        else:
            key = tuple(d.key() for d in rollout)
            result = graph.lookup_exact(list(rollout))
            if key in inserted:
                assert result is not None and result.payload == inserted[key]
            else:
                assert result is None


# -- export ---------------------------------------------------------------------------


def test_export_dot_empty_graph():
    dot = TaskGraph("t").export_dot()
    assert dot.count("[label=") == 1 and "root" in dot


def test_export_dot_example_counts(example_graph):
    dot = example_graph.export_dot()
    node_lines = [l for l in dot.splitlines() if "[label=" in l and "->" not in l]
    edge_lines = [l for l in dot.splitlines() if "->" in l]
    assert len(node_lines) == example_graph.node_count() == 8
    assert len(edge_lines) == example_graph.node_count() - 1 == 7
    assert dot.count("lightgrey") == 1  # exactly the snapshot-bearing node


def test_export_dot_is_deterministic(example_graph):
    twin = build_example_graph(snap_ref())
    # Same content regardless of construction interleaving.
    a = build_example_graph(snap_ref())
    assert a.export_dot() == twin.export_dot()
    assert example_graph.export_dot() == example_graph.export_dot()
