import threading

import numpy as np
import pytest

from ensemble.comms import Message, start_transport
from ensemble.core import CalcStatus, GenSpecs, IoFailure, SimSpecs, Tag
from ensemble.history import decode_batch, encode_batch
from ensemble.registry import register
from ensemble.worker import (
    StageCollision,
    WorkdirPolicy,
    WorkerSetup,
    copy_back,
    persis_send_recv,
    prepare_workdir,
    rng_from,
    store_rng,
    worker_loop,
)


@register("test_sim_touch")
def _sim_touch(H, persis_info, specs, libE_info):
    from pathlib import Path

    (Path(libE_info["workdir"]) / "result.txt").write_text(str(libE_info["sim_ids"]))
    out = np.zeros(len(H), dtype=[("f", float)])
    out["f"] = np.linalg.norm(H["x"], axis=1)
    return out, persis_info


@register("test_sim_raise")
def _sim_raise(H, persis_info, specs, libE_info):
    raise RuntimeError("boom from user code")


@register("test_gen_echo_persistent")
def _gen_echo(H, persis_info, specs, libE_info):
    comm = libE_info["comm"]
    replies = []
    batch = np.zeros(2, dtype=[("x", float, (2,))])
    while True:
        tag, calc_in = persis_send_recv(comm, batch)
        if tag in (Tag.STOP_TAG, Tag.PERSIS_STOP):
            break
        replies.append(None if calc_in is None else len(calc_in))
        batch = None
    persis_info["replies"] = replies
    return None, persis_info, CalcStatus.PERSIS_FINISHED


def _start(tmp_path, sim, gen=None, policy=None):
    setup = WorkerSetup(sim, gen, policy or WorkdirPolicy(), str(tmp_path / "ens"), str(tmp_path), chdir=False)
    t = start_transport("inproc", 1, target=worker_loop, args=(setup,))
    return t, t.manager


def _eval(mgr, calc_type, sim_ids, H, persistent=False):
    payload = {
        "calc_type": calc_type,
        "sim_ids": sim_ids,
        "H": encode_batch(H),
        "persis_info": {"rng_seed": 1, "worker_id": 1},
        "resources": None,
        "persistent": persistent,
        "libE_info": {},
    }
    mgr.send(Message(Tag.EVAL_SIM if calc_type == "sim" else Tag.EVAL_GEN, 0, 1, payload))


def _x(points):
    H = np.zeros(len(points), dtype=[("sim_id", np.int64), ("x", float, (2,))])
    H["x"] = points
    H["sim_id"] = np.arange(len(points))
    return H


def test_eval_sim_norm_result(tmp_path):
    sim = SimSpecs("sim_norm", ["x"], [("f", "float64")])
    t, mgr = _start(tmp_path, sim)
    _eval(mgr, "sim", [0], _x([[3.0, 4.0]]))
    res = mgr.recv(timeout=10)
    assert res.tag == Tag.RESULT and res.payload["calc_status"] == CalcStatus.COMPLETED
    assert decode_batch(res.payload["H"])["f"][0] == 5.0
    mgr.send(Message(Tag.STOP_TAG, 0, 1, {}))
    assert t.join(5)


def test_user_exception_reported_and_worker_survives(tmp_path):
    sim = SimSpecs("test_sim_raise", ["x"], [("f", "float64")])
    t, mgr = _start(tmp_path, sim)
    _eval(mgr, "sim", [0], _x([[1.0, 1.0]]))
    res = mgr.recv(timeout=10)
    assert res.payload["calc_status"] == CalcStatus.FAILED
    assert "boom from user code" in res.payload["error"] and "Traceback" in res.payload["error"]
    _eval(mgr, "sim", [1], _x([[1.0, 1.0]]))
    assert mgr.recv(timeout=10).tag == Tag.RESULT  # still serving
    mgr.send(Message(Tag.STOP_TAG, 0, 1, {}))
    assert t.join(5)


def test_one_result_per_unit_and_dirs_match_dispatch(tmp_path):
    sim = SimSpecs("test_sim_touch", ["x"], [("f", "float64")])
    policy = WorkdirPolicy(use_workdirs=True, per_sim_dirs=True, copy_back=True)
    t, mgr = _start(tmp_path, sim, policy=policy)
    for sid in (4, 7, 9):
        _eval(mgr, "sim", [sid], _x([[0.0, 1.0]]))
        assert mgr.recv(timeout=10).payload["sim_ids"] == [sid]
    mgr.send(Message(Tag.STOP_TAG, 0, 1, {}))
    assert t.join(5)
    made = sorted(p.name for p in (tmp_path / "ens").iterdir())
    assert made == ["sim4_worker1", "sim7_worker1", "sim9_worker1"]
    back = sorted(p.name for p in (tmp_path / "ensemble_back").iterdir())
    assert back == made
    assert (tmp_path / "ensemble_back" / "sim7_worker1" / "result.txt").read_text() == "[7]"


def test_persistent_protocol_stop(tmp_path):
    gen = GenSpecs("test_gen_echo_persistent", [], [("x", "float64", (2,))])
    t, mgr = _start(tmp_path, None, gen)
    _eval(mgr, "gen", [], None, persistent=True)
    up = mgr.recv(timeout=10)
    assert up.tag == Tag.PERSIS_UPDATE and len(decode_batch(up.payload["H"])) == 2
    reply = {"H": encode_batch(np.zeros(2, dtype=[("sim_id", np.int64), ("f", float)])), "sim_ids": [0, 1], "new_sim_ids": [0, 1]}
    mgr.send(Message(Tag.PERSIS_UPDATE, 0, 1, reply))
    poll = mgr.recv(timeout=10)
    assert poll.tag == Tag.PERSIS_UPDATE and poll.payload["H"] is None  # empty batch is a pure poll
    mgr.send(Message(Tag.PERSIS_STOP, 0, 1, {}))
    res = mgr.recv(timeout=10)
    assert res.tag == Tag.RESULT and res.payload["calc_status"] == CalcStatus.PERSIS_FINISHED
    assert res.payload["persis_info"]["replies"] == [2]
    mgr.send(Message(Tag.STOP_TAG, 0, 1, {}))
    assert t.join(5)


def test_stale_kill_ignored(tmp_path):
    sim = SimSpecs("sim_norm", ["x"], [("f", "float64")])
    t, mgr = _start(tmp_path, sim)
    mgr.send(Message(Tag.MAN_KILL, 0, 1, {"sim_ids": [42]}))
    _eval(mgr, "sim", [0], _x([[0.0, 2.0]]))
    assert mgr.recv(timeout=10).payload["calc_status"] == CalcStatus.COMPLETED
    mgr.send(Message(Tag.STOP_TAG, 0, 1, {}))
    assert t.join(5)


def test_workdir_naming_and_idempotence(tmp_path):
    pol = WorkdirPolicy(use_workdirs=True, per_sim_dirs=True)
    d = prepare_workdir(pol, 7, tmp_path / "ens", 2)
    assert d == tmp_path / "ens" / "sim7_worker2" and d.is_dir()
    assert prepare_workdir(pol, 7, tmp_path / "ens", 2) == d
    assert prepare_workdir(WorkdirPolicy(use_workdirs=True), 7, tmp_path / "ens", 2).name == "worker2"
    assert prepare_workdir(WorkdirPolicy(), 7, tmp_path / "ens", 2, launch_dir=tmp_path) == tmp_path


def test_staging_copies_and_links(tmp_path):
    big = tmp_path / "big_input.dat"
    big.write_bytes(b"\0" * 4096)
    small = tmp_path / "params.in"
    small.write_text("a=1\n")
    pol = WorkdirPolicy(use_workdirs=True, per_sim_dirs=True, copy_files=[str(small)], symlink_files=[str(big)])
    d = prepare_workdir(pol, 0, tmp_path / "ens", 1)
    assert (d / "big_input.dat").is_symlink() and (d / "big_input.dat").resolve() == big.resolve()
    assert not (d / "params.in").is_symlink() and (d / "params.in").read_text() == "a=1\n"
    prepare_workdir(pol, 0, tmp_path / "ens", 1)  # retry reuses
    small.write_text("a=2\n")
    with pytest.raises(StageCollision):
        prepare_workdir(pol, 0, tmp_path / "ens", 1)


def test_copy_and_link_must_be_disjoint(tmp_path):
    with pytest.raises(ValueError):
        WorkdirPolicy(copy_files=[str(tmp_path / "a")], symlink_files=[str(tmp_path / "a")])


def test_unwritable_ensemble_dir_is_io_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(IoFailure):
        prepare_workdir(WorkdirPolicy(use_workdirs=True), 0, blocker / "ens", 1)


def test_copy_back_collision_suffix(tmp_path):
    ens = tmp_path / "ens"
    pol = WorkdirPolicy(use_workdirs=True, per_sim_dirs=True, copy_back=True)
    for sid in range(3):
        (prepare_workdir(pol, sid, ens, 1) / "out.txt").write_text(str(sid))
    assert len(copy_back(pol, ens, tmp_path)) == 3
    again = copy_back(pol, ens, tmp_path)
    assert sorted(p.name for p in again) == ["sim0_worker1_1", "sim1_worker1_1", "sim2_worker1_1"]
    assert copy_back(WorkdirPolicy(use_workdirs=True), ens, tmp_path) == []


def test_rng_stream_resumes():
    info = {"rng_seed": 5}
    rng = rng_from(info)
    first = rng.uniform(size=3)
    store_rng(info, rng)
    cont = rng_from(info).uniform(size=3)
    ref = np.random.Generator(np.random.PCG64(5)).uniform(size=6)
    assert np.array_equal(np.concatenate([first, cont]), ref)


def test_kill_flag_only_for_assigned(tmp_path):
    """A kill for the unit in progress reaches the executor's flag."""
    seen = threading.Event()

    @register("test_sim_wait_kill")
    def _wait(H, persis_info, specs, libE_info):
        for _ in range(200):
            if libE_info["kill_requested"]():
                seen.set()
                return None, persis_info, CalcStatus.KILLED
            threading.Event().wait(0.01)
        return None, persis_info, CalcStatus.COMPLETED

    sim = SimSpecs("test_sim_wait_kill", ["x"], [("f", "float64")])
    t, mgr = _start(tmp_path, sim)
    _eval(mgr, "sim", [3], _x([[0.0, 0.0]]))
    mgr.send(Message(Tag.MAN_KILL, 0, 1, {"sim_ids": [3]}))
    res = mgr.recv(timeout=10)
    assert res.payload["calc_status"] == CalcStatus.KILLED and seen.is_set()
    mgr.send(Message(Tag.STOP_TAG, 0, 1, {}))
    assert t.join(5)
