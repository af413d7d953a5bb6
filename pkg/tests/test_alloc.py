import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemble.alloc import (
    AllocView,
    NoGeneratorNeeded,
    WorkerState,
    WorkerStatus,
    avail_worker_ids,
    give_sim_work_first,
    only_persistent_gen,
    pre_generated,
)
from ensemble.core import ExitCriteria, FieldSpec, GenSpecs, SimSpecs, Tag, schema_union
from ensemble.history import HistoryStore
from ensemble.resources import NodeInventory, ResourceTable, assign

SIM = SimSpecs("sim_norm", ["x"], [("f", "float64")])
GEN = GenSpecs("gen_uniform_sample", [], [("x", "float64", (1,))])


def store(n, extra=()):
    h = HistoryStore(schema_union([FieldSpec("x", "float64", (1,)), *extra], [FieldSpec("f")]))
    if n:
        h.append({"x": np.arange(float(n)).reshape(n, 1)})
    return h


def workers(n, zero=(), busy=()):
    return {w: WorkerState(w, WorkerStatus.BUSY_SIM if w in busy else WorkerStatus.IDLE, zero_resource=w in zero) for w in range(1, n + 1)}


def view(h, ws, gen=GEN, **kw):
    return AllocView(h.H, ws, SIM, gen, **kw)


def test_avail_filters():
    ws = workers(3, zero=(1,), busy=(2, 3))
    v = view(store(0), ws)
    assert avail_worker_ids(v) == [1]
    assert avail_worker_ids(v, zero_resource_ok=False) == []
    ws[3].status = WorkerStatus.PERSISTENT_GEN
    ws[3].persis_waiting = True
    assert avail_worker_ids(v) == [1]
    assert avail_worker_ids(v, persistent_ok=True) == [1, 3]


def test_lowest_ids_first():
    units = give_sim_work_first(view(store(3), workers(2)))
    assert {w: u.sim_ids for w, u in units.items()} == {1: [0], 2: [1]}
    assert all(u.kind == Tag.EVAL_SIM for u in units.values())


def test_canceled_rows_skipped_and_gen_called():
    h = store(3)
    h.request_cancel([0, 1, 2])
    units = give_sim_work_first(view(h, workers(2)))
    assert len(units) == 1 and units[1].kind == Tag.EVAL_GEN


def test_priority_order():
    h = HistoryStore(schema_union([FieldSpec("x", "float64", (1,)), FieldSpec("priority")], [FieldSpec("f")]))
    h.append({"x": np.zeros((5, 1)), "priority": np.array([0.0, 2.0, 1.0, 2.0, 0.5])})
    units = give_sim_work_first(view(h, workers(5)))
    order = [units[w].sim_ids[0] for w in sorted(units)]
    assert order == [1, 3, 2, 4, 0]


def test_large_row_held_back_small_row_scheduled():
    h = store(2, extra=[FieldSpec("resource_sets", "int64")])
    h2 = HistoryStore(h.schema)
    h2.append({"x": np.zeros((2, 1)), "resource_sets": np.array([3, 1])})
    table = ResourceTable.from_inventory(NodeInventory((("n0", 4),)), 4)
    assign(9, 2, table)  # two sets busy
    units = give_sim_work_first(view(h2, workers(2), gen=None, resources=table))
    assert [u.sim_ids for u in units.values()] == [[1]]


def test_persistent_gen_start_on_zero_resource_worker():
    ws = workers(4, zero=(1,))
    units = only_persistent_gen(view(store(0), ws))
    assert list(units) == [1] and units[1].persistent and units[1].kind == Tag.EVAL_GEN


def test_persistent_capacity():
    h = store(10)
    ws = workers(4, zero=(1,))
    ws[1].status, ws[1].persis_waiting = WorkerStatus.PERSISTENT_GEN, False
    units = only_persistent_gen(view(h, ws))
    assert sorted(units) == [2, 3, 4]
    assert sum(1 for i in range(10) if any(i in u.sim_ids for u in units.values())) == 3


def test_persistent_restart_and_disable():
    ws = workers(2, zero=(1,))
    v = view(store(0), ws, exit_criteria=ExitCriteria(sim_max=5), gen_calls=1)
    assert 1 in only_persistent_gen(v)
    v.user = {"restart_gen": False}
    assert only_persistent_gen(v) == {}


def test_pre_generated_farming():
    h = store(2046)
    units = pre_generated(view(h, workers(1023), gen=None))
    assert len(units) == 1023 and all(u.kind == Tag.EVAL_SIM for u in units.values())
    assert pre_generated(view(store(0), workers(3), gen=None)) == {}


def test_pre_generated_skips_given_rows():
    h = store(4)
    h.mark_given([0, 1], 1, 0.0)
    h.update(0, {"f": 1.0})
    units = pre_generated(view(h, workers(4), gen=None))
    assert sorted(u.sim_ids[0] for u in units.values()) == [2, 3]


def test_pre_generated_gen_fields_missing():
    with pytest.raises(NoGeneratorNeeded):
        pre_generated(view(store(2), workers(1), preloaded_fields=frozenset()))
    assert pre_generated(view(store(2), workers(1), preloaded_fields=frozenset({"x"})))


# ----------------------------------------------------------- invariants


@st.composite
def scenes(draw):
    n_rows = draw(st.integers(0, 20))
    h = HistoryStore(schema_union([FieldSpec("x", "float64", (1,)), FieldSpec("priority"), FieldSpec("resource_sets", "int64")], [FieldSpec("f")]))
    if n_rows:
        h.append(
            {
                "x": np.zeros((n_rows, 1)),
                "priority": np.array(draw(st.lists(st.sampled_from([0.0, 1.0, 2.0]), min_size=n_rows, max_size=n_rows))),
                "resource_sets": np.array(draw(st.lists(st.integers(1, 4), min_size=n_rows, max_size=n_rows))),
            }
        )
    nw = draw(st.integers(1, 8))
    zero = {1} if draw(st.booleans()) else set()
    ws = workers(nw, zero=zero)
    table = ResourceTable.from_inventory(NodeInventory((("a", 4), ("b", 4))), 8) if draw(st.booleans()) else None
    for i in range(n_rows):
        action = draw(st.sampled_from(["none", "give", "cancel", "return"]))
        if action == "cancel":
            h.request_cancel([i])
        elif action in ("give", "return"):
            w = draw(st.integers(1, nw))
            if ws[w].status == WorkerStatus.IDLE and not ws[w].zero_resource:
                if table is not None:
                    try:
                        ws[w].resource_sets = assign(w, int(h.H["resource_sets"][i]), table).set_ids
                    except Exception:
                        continue
                ws[w].status, ws[w].sim_ids = WorkerStatus.BUSY_SIM, [i]
                h.mark_given([i], w, 0.0)
    alloc = draw(st.sampled_from([give_sim_work_first, only_persistent_gen, pre_generated]))
    sim_max = draw(st.one_of(st.none(), st.integers(1, 30)))
    ec = ExitCriteria(sim_max=sim_max, gen_max=50)
    gen = None if alloc is pre_generated else GEN
    return alloc, AllocView(h.H, ws, SIM, gen, resources=table, exit_criteria=ec)


@settings(max_examples=500, deadline=None)
@given(scenes())
def test_property_allocator_invariants(scene):
    alloc, v = scene
    free_before = {s.id for s in v.resources.free_sets()} if v.resources else set()
    units = alloc(v)
    again = alloc(v)
    assert units == again  # pure in the view
    named = []
    used_sets = []
    for w, u in units.items():
        assert u.dest == w
        st_ = v.workers[w]
        if not u.reply:
            assert st_.status == WorkerStatus.IDLE
        if u.kind == Tag.EVAL_SIM:
            assert not st_.zero_resource
            for i in u.sim_ids:
                assert not v.H["given"][i] and not v.H["cancel_requested"][i]
            named += u.sim_ids
        used_sets += u.resource_sets
    assert len(named) == len(set(named))
    assert len(used_sets) == len(set(used_sets))
    assert set(used_sets) <= free_before
    if v.exit_criteria.sim_max is not None:
        assert v.count("given") + len(named) <= max(v.exit_criteria.sim_max, v.count("given"))
    if "priority" in v.H.dtype.names and named and v.resources is None:
        pr = [v.H["priority"][i] for i in sorted(named, key=lambda i: [w for w, u in units.items() if i in u.sim_ids][0])]
        assert all(a >= b for a, b in zip(pr, pr[1:]))
