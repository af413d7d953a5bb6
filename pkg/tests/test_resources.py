import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemble.resources import (
    IndivisibleResources,
    InsufficientResources,
    MalformedNodeList,
    NodeInventory,
    ResourceError,
    ResourceTable,
    WorkerResources,
    assign,
    build_resource_sets,
    default_nsets,
    detect_inventory,
    release,
)

# node names deliberately out of inventory order so name and id tie-breaks differ
NAMES = ("nb", "na", "nc")


def brute_force(table: ResourceTable, k: int):
    """Every k-subset of the free sets, ranked by (span, leftover, names, ids)."""
    free = table.free_sets()
    free_slots = {}
    for s in free:
        free_slots[s.node] = free_slots.get(s.node, 0) + len(s.slots)
    best = None
    for subset in itertools.combinations(free, k):
        nodes = sorted({s.node for s in subset})
        leftover = sum(free_slots[n] for n in nodes) - sum(len(s.slots) for s in subset)
        key = (len(nodes), leftover, tuple(nodes), tuple(sorted(s.id for s in subset)))
        if best is None or key < best:
            best = key
    return None if best is None else list(best[3])


def inventories():
    for n_nodes in (1, 2, 3):
        for per_node in itertools.product(range(1, 5), repeat=n_nodes):
            for size in (1, 2):
                inv = NodeInventory(tuple((NAMES[i], c * size) for i, c in enumerate(per_node)))
                yield inv, sum(per_node)


def exhaustive_cases() -> int:
    """Compare ``assign`` with the brute-force ranking everywhere; returns the case count."""
    rnd = random.Random(7)
    cases = 0
    for inv, nsets in inventories():
        base = ResourceTable.from_inventory(inv, nsets)
        masks = range(2**nsets) if nsets <= 7 else rnd.sample(range(2**nsets), 48)
        for mask in masks:
            table = base.copy()
            for i in range(nsets):
                if mask >> i & 1:
                    table.owner[i] = 99
            n_free = nsets - bin(mask).count("1")
            for k in range(1, nsets + 1):
                t = table.copy()
                if k > n_free:
                    with pytest.raises(InsufficientResources):
                        assign(1, k, t)
                    continue
                got = assign(1, k, t).set_ids
                assert got == brute_force(table, k), (inv, mask, k)
                cases += 1
    return cases


def test_assign_matches_brute_force_exhaustively():
    assert exhaustive_cases() > 5000


def test_smallest_partition_example():
    inv = NodeInventory((("A", 4), ("B", 4)))
    t = ResourceTable.from_inventory(inv, 8)
    for i in (0, 1, 2):  # node A keeps one free set
        t.owner[i] = 5
    wr = assign(1, 1, t)
    assert wr.set_ids == [3] and wr.local_node_count == 1


def test_spanning_example():
    inv = NodeInventory((("A", 2), ("B", 2)))
    t = ResourceTable.from_inventory(inv, 4)
    wr = assign(1, 3, t)
    assert wr.local_node_count == 2 and sum(len(v) for v in wr.slots.values()) == 3


def test_zero_request_is_empty():
    t = ResourceTable.from_inventory(NodeInventory((("A", 1),)), 1)
    t.owner[0] = 3
    assert assign(2, 0, t).set_ids == []


def test_build_sets():
    sets = build_resource_sets(NodeInventory((("n1", 8), ("n2", 8))), 8)
    assert [len(s.slots) for s in sets] == [2] * 8
    assert [s.node for s in sets] == ["n1"] * 4 + ["n2"] * 4
    assert sets[1].slots == (2, 3)
    assert [s.slots for s in build_resource_sets(NodeInventory((("h", 4),)), 4)] == [(0,), (1,), (2,), (3,)]
    with pytest.raises(IndivisibleResources):
        build_resource_sets(NodeInventory((("h", 4),)), 3)
    with pytest.raises(IndivisibleResources):
        build_resource_sets(NodeInventory((("a", 3), ("b", 1))), 2)


def test_partition_covers_every_slot_once():
    for inv, nsets in inventories():
        sets = build_resource_sets(inv, nsets)
        cells = [(s.node, slot) for s in sets for slot in s.slots]
        assert len(cells) == len(set(cells)) == inv.total_slots


def test_detect_precedence(tmp_path):
    (tmp_path / "node_list").write_text("nid001 8\nnid002 8\n")
    inv = detect_inventory({}, env={}, rundir=tmp_path)
    assert inv.nodes == (("nid001", 8), ("nid002", 8)) and inv.source == "node_file"
    inv = detect_inventory({}, env={"ENS_NODELIST": "a:2,b:2"}, rundir=tmp_path)
    assert inv.nodes == (("a", 2), ("b", 2)) and inv.source == "env_var"
    inv = detect_inventory({"nodes": [["x", 1]]}, env={"ENS_NODELIST": "a:2"}, rundir=tmp_path)
    assert inv.nodes == (("x", 1),)
    inv = detect_inventory({}, env={}, rundir=tmp_path / "missing")
    assert inv.source == "probe_default" and len(inv.nodes) == 1


def test_malformed_node_lists(tmp_path):
    (tmp_path / "node_list").write_text("nid001 0\n")
    with pytest.raises(MalformedNodeList):
        detect_inventory({}, env={}, rundir=tmp_path)
    with pytest.raises(MalformedNodeList):
        detect_inventory({}, env={"ENS_NODELIST": "a:b"})
    with pytest.raises(MalformedNodeList):
        NodeInventory((("a", 1), ("a", 2)))


def test_central_mode_drops_first_node():
    inv = NodeInventory((("head", 4), ("c1", 4)))
    assert inv.without_first_node().nodes == (("c1", 4),)
    with pytest.raises(ResourceError):
        NodeInventory((("only", 4),)).without_first_node()


def test_release_inverse_and_idempotent():
    t = ResourceTable.from_inventory(NodeInventory((("a", 4), ("b", 4))), 4)
    before = dict(t.owner)
    assign(3, 3, t)
    assert release(3, t)
    assert t.owner == before
    assert release(3, t) == []


def test_worker_resources_json_and_views():
    t = ResourceTable.from_inventory(NodeInventory((("a", 4), ("b", 4))), 4)
    wr = assign(2, 3, t)
    back = WorkerResources.from_json(wr.to_json())
    assert back == wr
    assert wr.slots_on_node == [0, 1, 2, 3]
    assert WorkerResources.from_json(None) is None


def test_default_nsets():
    assert default_nsets(5, (1,)) == 4
    assert default_nsets(1, (1,)) == 1


def _check_partition(t: ResourceTable, held: dict):
    owners = {}
    for sid, w in t.owner.items():
        if w is not None:
            owners.setdefault(w, set()).add(sid)
    assert owners == {w: s for w, s in held.items() if s}
    all_ids = {s.id for s in t.sets}
    seen = set()
    for s in owners.values():
        assert not (s & seen)
        seen |= s
    assert seen <= all_ids


def test_assign_release_fuzz_partition_invariant():
    rnd = random.Random(11)
    inv = NodeInventory((("n0", 8), ("n1", 8), ("n2", 4)))
    t = ResourceTable.from_inventory(inv, 10)
    held: dict[int, set] = {}
    for _ in range(10_000):
        w = rnd.randint(1, 6)
        if held.get(w):
            release(w, t)
            held[w] = set()
        else:
            k = rnd.randint(0, 5)
            try:
                held[w] = set(assign(w, k, t).set_ids)
            except InsufficientResources:
                assert len(t.free_sets()) < k
        _check_partition(t, held)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(0, 4)), max_size=30))
def test_property_zero_request_never_holds(ops):
    t = ResourceTable.from_inventory(NodeInventory((("a", 4), ("b", 4))), 8)
    for w, k in ops:
        release(w, t)
        try:
            wr = assign(w, k, t)
        except InsufficientResources:
            continue
        if k == 0:
            assert wr.set_ids == [] and t.held_by(w) == []
