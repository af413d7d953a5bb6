import os
import subprocess
import sys
import threading
import time
from pathlib import Path

import psutil
import pytest

from ensemble.core import Timeout
from ensemble.executor import (
    DuplicateApp,
    Executor,
    LaunchExhausted,
    MissingExecutable,
    TaskState,
    UnregisteredApp,
    WatchOutcome,
    synthetic_app_registration,
)
from ensemble.resources import InsufficientResources, NodeInventory, ResourceTable, assign

SYN = synthetic_app_registration()


@pytest.fixture
def ex(tmp_path):
    e = Executor(1, cwd=tmp_path, grace=1.0, backoff=0.01)
    e.register_apps({"synthetic": SYN})
    yield e
    e.kill_all()


def _run(ex, *args, **kw):
    return ex.submit("synthetic", [str(a) for a in args], **kw)


def test_register_errors(tmp_path):
    e = Executor()
    e.register_app("py", sys.executable)
    with pytest.raises(DuplicateApp):
        e.register_app("py", sys.executable)
    with pytest.raises(MissingExecutable):
        e.register_app("nope", tmp_path / "does-not-exist")
    with pytest.raises(UnregisteredApp):
        e.submit("ghost")
    assert e.app("py").path == sys.executable


def test_finished_and_failed(ex, tmp_path):
    t = _run(ex, "--duration", 0.05, "--outfile", tmp_path / "a.txt")
    assert ex.wait(t, timeout=10) == TaskState.FINISHED and t.returncode == 0
    assert t.submit_time <= t.start_time <= t.end_time
    t2 = _run(ex, "--duration", 0.01, "--outfile", tmp_path / "b.txt", "--exit-code", 3)
    assert ex.wait(t2, timeout=10) == TaskState.FAILED and t2.returncode == 3
    assert t2.retries == 0


def test_wait_timeout_leaves_running(ex, tmp_path):
    t = _run(ex, "--duration", 5, "--outfile", tmp_path / "s.txt")
    with pytest.raises(Timeout):
        ex.wait(t, timeout=0.1)
    assert t.state == TaskState.RUNNING and t.end_time is None
    ex.kill(t)
    assert t.state == TaskState.KILLED and t.end_time is not None


def test_kill_is_prompt_and_idempotent(ex, tmp_path):
    t = _run(ex, "--duration", 10, "--outfile", tmp_path / "k.txt")
    time.sleep(0.2)
    t0 = time.monotonic()
    ex.kill(t, grace=1.0)
    assert time.monotonic() - t0 < 1.0
    assert t.state == TaskState.KILLED
    ex.kill(t)
    assert t.state == TaskState.KILLED


def test_kill_finished_is_noop(ex, tmp_path):
    t = _run(ex, "--duration", 0.01, "--outfile", tmp_path / "f.txt")
    ex.wait(t, timeout=10)
    ex.kill(t)
    assert t.state == TaskState.FINISHED


def test_ignore_term_escalates(ex, tmp_path):
    t = _run(ex, "--duration", 30, "--outfile", tmp_path / "i.txt", "--ignore-term")
    time.sleep(0.3)
    t0 = time.monotonic()
    ex.kill(t, grace=0.5)
    elapsed = time.monotonic() - t0
    assert t.state == TaskState.KILLED
    assert 0.4 <= elapsed < 3.0
    assert not psutil.pid_exists(t.process.pid) or psutil.Process(t.process.pid).status() == psutil.STATUS_ZOMBIE


def test_env_from_resources(tmp_path):
    table = ResourceTable.from_inventory(NodeInventory((("n0", 4),)), 4)
    assign(9, 1, table)  # set 0 taken by someone else
    wr = assign(2, 3, table)
    e = Executor(2, wr, cwd=tmp_path)
    e.register_apps({"synthetic": SYN})
    t = e.submit("synthetic", ["--duration", "0.01", "--outfile", str(tmp_path / "env.txt"), "--report-env"], num_procs=3, env_from_resources=True)
    e.wait(t, timeout=10)
    text = (tmp_path / "env.txt").read_text()
    assert "ENV ENS_VISIBLE_SLOTS=1,2,3" in text
    assert "ENV ENS_NUM_PROCS=3" in text
    assert "ENV ENS_WORKER_ID=2" in text
    bare = Executor(3, None, cwd=tmp_path)
    bare.register_apps({"synthetic": SYN})
    with pytest.raises(InsufficientResources):
        bare.submit("synthetic", ["--duration", "0"], env_from_resources=True)


class FlakyPopen:
    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def __call__(self, *args, **kwargs):
        self.calls += 1
        if self.calls <= self.failures:
            raise OSError(8, "Exec format error")
        return subprocess.Popen(*args, **kwargs)


def test_retry_then_success(tmp_path):
    flaky = FlakyPopen(2)
    e = Executor(1, cwd=tmp_path, max_retries=3, backoff=0.01, popen=flaky)
    e.register_apps({"synthetic": SYN})
    t = e.submit("synthetic", ["--duration", "0.5", "--outfile", str(tmp_path / "r.txt")])
    assert t.state == TaskState.RUNNING and t.retries == 2 and flaky.calls == 3
    e.kill_all()


def test_retry_backoff_doubles(tmp_path, monkeypatch):
    sleeps = []
    monkeypatch.setattr("ensemble.executor.time.sleep", sleeps.append)
    e = Executor(1, cwd=tmp_path, max_retries=2, backoff=0.5, popen=FlakyPopen(99))
    e.register_apps({"synthetic": SYN})
    with pytest.raises(LaunchExhausted):
        e.submit("synthetic", ["--duration", "1"])
    assert sleeps == [0.5, 1.0]
    assert e.tasks[0].state == TaskState.FAILED and e.tasks[0].retries == 2


def test_nonzero_exit_not_retried(tmp_path):
    flaky = FlakyPopen(0)
    e = Executor(1, cwd=tmp_path, popen=flaky)
    e.register_apps({"synthetic": SYN})
    t = e.submit("synthetic", ["--duration", "0", "--outfile", str(tmp_path / "x"), "--exit-code", "1"])
    e.wait(t, timeout=10)
    assert t.state == TaskState.FAILED and flaky.calls == 1


def test_watch_kills_on_marker(ex, tmp_path):
    out = tmp_path / "w.txt"
    t = _run(ex, "--duration", 3.0, "--lost-at", 0.4, "--outfile", out)
    t0 = time.monotonic()
    assert ex.watch_output_and_kill(t, out, "PARTICLE LOST", 0.02) == WatchOutcome.KILLED_ON_MARKER
    assert time.monotonic() - t0 < 2.0
    assert t.state == TaskState.KILLED


def test_watch_clean_completion(ex, tmp_path):
    out = tmp_path / "c.txt"
    t = _run(ex, "--duration", 0.3, "--outfile", out)
    assert ex.watch_output_and_kill(t, out, "PARTICLE LOST", 0.02) == WatchOutcome.COMPLETED_CLEAN
    assert t.state == TaskState.FINISHED


def test_watch_marker_at_exit_race_is_legal(ex, tmp_path):
    out = tmp_path / "late.txt"
    t = _run(ex, "--duration", 0.2, "--lost-at", 0.2, "--outfile", out)
    got = ex.watch_output_and_kill(t, out, "PARTICLE LOST", 0.05)
    assert got in (WatchOutcome.COMPLETED_CLEAN, WatchOutcome.KILLED_ON_MARKER)
    assert t.state.terminal


def test_watch_missing_file_is_empty(ex, tmp_path):
    t = _run(ex, "--duration", 0.2, "--outfile", tmp_path / "real.txt")
    assert ex.watch_output_and_kill(t, tmp_path / "never.txt", "X", 0.02) == WatchOutcome.COMPLETED_CLEAN


def test_marker_split_across_reads(tmp_path):
    """The marker may straddle two incremental reads."""
    path = tmp_path / "split.txt"
    ex = Executor(1, cwd=tmp_path)
    ex.register_app("py", sys.executable)
    script = (
        "import sys,time\n"
        f"f=open({str(path)!r},'w')\n"
        "f.write('PARTICLE L'); f.flush(); time.sleep(0.4)\n"
        "f.write('OST t=1'); f.flush(); time.sleep(5)\n"
    )
    t = ex.submit("py", ["-c", script])
    assert ex.watch_output_and_kill(t, path, "PARTICLE LOST", 0.05) == WatchOutcome.KILLED_ON_MARKER


def test_kill_event_observed_by_poll(tmp_path):
    ev = threading.Event()
    e = Executor(1, cwd=tmp_path, kill_event=ev, grace=0.5)
    e.register_apps({"synthetic": SYN})
    t = e.submit("synthetic", ["--duration", "5", "--outfile", str(tmp_path / "m.txt")])
    threading.Timer(0.2, ev.set).start()
    assert e.wait(t, timeout=5) == TaskState.KILLED
    assert t.killed_by_manager


def test_no_orphans_from_process_group(tmp_path):
    """A child that forks a grandchild leaves nothing behind after kill."""
    e = Executor(1, cwd=tmp_path, grace=0.5)
    e.register_app("py", sys.executable)
    pidfile = tmp_path / "gc.pid"
    script = (
        "import subprocess,sys,time\n"
        "p=subprocess.Popen([sys.executable,'-c','import time; time.sleep(60)'])\n"
        f"open({str(pidfile)!r},'w').write(str(p.pid))\n"
        "time.sleep(60)\n"
    )
    t = e.submit("py", ["-c", script])
    deadline = time.monotonic() + 10
    while not pidfile.exists() or not pidfile.read_text():
        assert time.monotonic() < deadline
        time.sleep(0.05)
    grandchild = int(pidfile.read_text())
    e.kill(t)
    time.sleep(0.2)
    gone = not psutil.pid_exists(grandchild) or psutil.Process(grandchild).status() == psutil.STATUS_ZOMBIE
    assert gone
    assert not [c for c in psutil.Process(os.getpid()).children(recursive=True) if c.pid == t.process.pid and c.status() != psutil.STATUS_ZOMBIE]


def test_runner_prefix_prepended(tmp_path):
    seen = {}

    def fake(cmd, **kw):
        seen["cmd"] = cmd
        return subprocess.Popen([sys.executable, "-c", "pass"], **kw)

    e = Executor(1, cwd=tmp_path, runner_prefix="env FOO=1", popen=fake)
    e.register_app("py", sys.executable)
    t = e.submit("py", ["-V"])
    e.wait(t, timeout=10)
    assert seen["cmd"][:2] == ["env", "FOO=1"] and seen["cmd"][2] == sys.executable


def test_synthetic_app_outputs(tmp_path):
    out = tmp_path / "s.txt"
    subprocess.run([SYN["path"], *SYN["args"], "--duration", "0.2", "--lost-at", "0.1", "--outfile", str(out)], check=True)
    lines = Path(out).read_text().splitlines()
    assert "PARTICLE LOST t=0.100" in lines
    assert lines[-1] == "DONE t=0.200"
