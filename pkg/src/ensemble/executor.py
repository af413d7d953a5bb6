"""Launch external applications from inside simulator functions.

One ``Executor`` lives on each worker. Tasks run in their own process group so
a kill reaches every descendant. A manager kill request (``kill_event``) is
honoured at the next ``poll``/``wait``.

Alternative launch systems plug in by subclassing ``Executor`` and overriding
``_launch`` (start a task) and ``_signal`` (deliver a signal to it).
"""

from __future__ import annotations

import enum
import itertools
import logging
import os
import shutil
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .core import EnsembleError, Timeout
from .resources import InsufficientResources, WorkerResources

logger = logging.getLogger(__name__)

ENV_SLOTS = "ENS_VISIBLE_SLOTS"
ENV_NPROCS = "ENS_NUM_PROCS"
ENV_WORKER = "ENS_WORKER_ID"


class ExecutorError(EnsembleError):
    pass


class DuplicateApp(ExecutorError):
    pass


class MissingExecutable(ExecutorError):
    pass


class UnregisteredApp(ExecutorError):
    pass


class LaunchExhausted(ExecutorError):
    pass


class TaskState(str, enum.Enum):
    CREATED = "created"
    WAITING = "waiting"
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"
    KILLED = "killed"

    @property
    def terminal(self) -> bool:
        return self in (TaskState.FINISHED, TaskState.FAILED, TaskState.KILLED)


class WatchOutcome(str, enum.Enum):
    COMPLETED_CLEAN = "completed_clean"
    KILLED_ON_MARKER = "killed_on_marker"
    KILLED_BY_MANAGER = "killed_by_manager"


@dataclass(frozen=True)
class AppRegistration:
    name: str
    path: str
    fixed_args: tuple[str, ...] = ()


@dataclass
class Task:
    id: int
    app_name: str
    args: list[str]
    stdout: Path
    stderr: Path
    state: TaskState = TaskState.CREATED
    returncode: int | None = None
    submit_time: float | None = None
    start_time: float | None = None
    end_time: float | None = None
    retries: int = 0
    killed_by_manager: bool = False
    process: subprocess.Popen | None = field(default=None, repr=False)
    _files: list = field(default_factory=list, repr=False)

    @property
    def finished(self) -> bool:
        return self.state.terminal

    @property
    def runtime(self) -> float | None:
        if self.start_time is None:
            return None
        end = self.end_time if self.end_time is not None else time.time()
        return end - self.start_time

    def _close_files(self):
        for f in self._files:
            f.close()
        self._files.clear()


class Executor:
    def __init__(
        self,
        worker_id: int = 0,
        resources: WorkerResources | None = None,
        *,
        runner_prefix=(),
        max_retries: int = 2,
        backoff: float = 0.5,
        grace: float = 2.0,
        cwd=None,
        kill_event: threading.Event | None = None,
        popen=subprocess.Popen,
    ):
        self.worker_id = worker_id
        self.resources = resources
        self.runner_prefix = runner_prefix.split() if isinstance(runner_prefix, str) else list(runner_prefix)
        self.max_retries = int(max_retries)
        self.backoff = float(backoff)
        self.grace = float(grace)
        self.cwd = Path(cwd) if cwd is not None else None
        self.kill_event = kill_event or threading.Event()
        self._popen = popen
        self._apps: dict[str, AppRegistration] = {}
        self._ids = itertools.count()
        self.tasks: list[Task] = []

    # ---------------------------------------------------------------- apps

    def register_app(self, name: str, path, fixed_args=()) -> AppRegistration:
        if name in self._apps:
            raise DuplicateApp(f"app {name!r} already registered")
        path = str(path)
        resolved = path if os.sep in path else shutil.which(path)
        if not resolved or not os.path.isfile(resolved) or not os.access(resolved, os.X_OK):
            raise MissingExecutable(f"{path!r} is not an executable file")
        reg = AppRegistration(name, resolved, tuple(str(a) for a in fixed_args))
        self._apps[name] = reg
        return reg

    def register_apps(self, apps: dict) -> None:
        """Register ``{name: {"path": ..., "args": [...]}}`` entries."""
        for name, entry in (apps or {}).items():
            if isinstance(entry, str):
                entry = {"path": entry}
            self.register_app(name, entry["path"], entry.get("args", ()))

    def app(self, name: str) -> AppRegistration:
        try:
            return self._apps[name]
        except KeyError:
            raise UnregisteredApp(f"no app registered as {name!r}") from None

    @property
    def apps(self) -> dict[str, AppRegistration]:
        return dict(self._apps)

    # -------------------------------------------------------------- launch

    def _env(self, num_procs: int, env_from_resources: bool, extra_env) -> dict:
        env = dict(os.environ)
        env[ENV_WORKER] = str(self.worker_id)
        env[ENV_NPROCS] = str(num_procs)
        if env_from_resources:
            if self.resources is None or not self.resources.sets:
                raise InsufficientResources(f"worker {self.worker_id} holds no resource sets")
            env[ENV_SLOTS] = ",".join(str(s) for s in self.resources.slots_on_node)
        if extra_env:
            env.update({k: str(v) for k, v in extra_env.items()})
        return env

    def _launch(self, cmd, env, cwd, stdout, stderr) -> subprocess.Popen:
        return self._popen(cmd, env=env, cwd=cwd, stdout=stdout, stderr=stderr, stdin=subprocess.DEVNULL, start_new_session=True)

    def submit(
        self,
        app_name: str,
        app_args=(),
        num_procs: int = 1,
        stdout="out.txt",
        stderr="err.txt",
        env_from_resources: bool = False,
        *,
        cwd=None,
        extra_env=None,
    ) -> Task:
        """Start an application and return its running Task.

        Exec failures are retried ``max_retries`` times with doubling backoff;
        a started app that exits nonzero is never retried.
        """
        reg = self.app(app_name)
        workdir = Path(cwd) if cwd is not None else (self.cwd or Path.cwd())
        task = Task(
            next(self._ids),
            app_name,
            [str(a) for a in app_args],
            workdir / stdout,
            workdir / stderr,
            submit_time=time.time(),
        )
        self.tasks.append(task)
        env = self._env(num_procs, env_from_resources, extra_env)
        cmd = [*self.runner_prefix, reg.path, *reg.fixed_args, *task.args]
        task.state = TaskState.WAITING
        delay = self.backoff
        while True:
            out = open(task.stdout, "wb")
            err = open(task.stderr, "wb")
            try:
                task.process = self._launch(cmd, env, str(workdir), out, err)
                break
            except OSError as exc:
                out.close()
                err.close()
                if task.retries >= self.max_retries:
                    task.state = TaskState.FAILED
                    task.end_time = time.time()
                    raise LaunchExhausted(f"{app_name}: launch failed after {task.retries + 1} attempts: {exc}") from exc
                task.retries += 1
                logger.info("launch of %s failed (%s); retry %d in %.2fs", app_name, exc, task.retries, delay)
                time.sleep(delay)
                delay *= 2
        task._files = [out, err]
        task.start_time = time.time()
        task.state = TaskState.RUNNING
        logger.debug("task %d (%s) started pid %d", task.id, app_name, task.process.pid)
        return task

    # ------------------------------------------------------------- control

    def _finish(self, task: Task, state: TaskState) -> None:
        task.state = state
        task.returncode = task.process.returncode if task.process else task.returncode
        task.end_time = time.time()
        task._close_files()

    def _signal(self, task: Task, sig) -> None:
        try:
            os.killpg(task.process.pid, sig)
        except (ProcessLookupError, PermissionError):
            pass

    def poll(self, task: Task) -> TaskState:
        if task.state.terminal:
            return task.state
        if self.kill_event.is_set():
            task.killed_by_manager = True
            self.kill(task)
            return task.state
        rc = task.process.poll()
        if rc is not None:
            self._signal(task, signal.SIGKILL)  # reap stray descendants
            self._finish(task, TaskState.FINISHED if rc == 0 else TaskState.FAILED)
        return task.state

    def wait(self, task: Task, timeout: float | None = None, interval: float = 0.02) -> TaskState:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self.poll(task).terminal:
            if deadline is not None and time.monotonic() >= deadline:
                raise Timeout(f"task {task.id} still {task.state.value} after {timeout}s")
            time.sleep(interval if deadline is None else min(interval, max(deadline - time.monotonic(), 0)))
        return task.state

    def kill(self, task: Task, grace: float | None = None) -> None:
        """Terminate, then hard-kill after ``grace`` seconds. No-op on finished tasks."""
        if task.state.terminal:
            return
        if task.process is None:
            self._finish(task, TaskState.KILLED)
            return
        grace = self.grace if grace is None else grace
        self._signal(task, signal.SIGTERM)
        try:
            task.process.wait(grace)
        except subprocess.TimeoutExpired:
            logger.info("task %d ignored SIGTERM; sending SIGKILL", task.id)
        self._signal(task, signal.SIGKILL)
        task.process.wait()
        self._finish(task, TaskState.KILLED)

    def watch_output_and_kill(self, task: Task, path, marker: str, poll_interval: float = 0.05) -> WatchOutcome:
        """Scan ``path`` as it grows; kill the task once ``marker`` shows up."""
        path = Path(path)
        needle = marker.encode()
        offset, tail = 0, b""
        while True:
            state = self.poll(task)
            if task.killed_by_manager:
                return WatchOutcome.KILLED_BY_MANAGER
            try:
                with open(path, "rb") as fh:
                    fh.seek(offset)
                    chunk = fh.read()
            except FileNotFoundError:
                chunk = b""
            offset += len(chunk)
            window = tail + chunk
            if needle in window:
                if state.terminal:
                    return WatchOutcome.COMPLETED_CLEAN
                self.kill(task)
                return WatchOutcome.KILLED_ON_MARKER
            tail = window[-(len(needle) - 1):] if len(needle) > 1 else b""
            if state.terminal:
                return WatchOutcome.COMPLETED_CLEAN
            time.sleep(poll_interval)

    def kill_all(self) -> int:
        """Kill every unfinished task. Returns how many were killed."""
        n = 0
        for t in self.tasks:
            if not t.state.terminal:
                self.kill(t, grace=min(self.grace, 0.5))
                n += 1
        return n


def synthetic_app_registration() -> dict:
    """Registry entry for the bundled synthetic application."""
    # run by path so the child skips importing the package (and numpy)
    return {"path": sys.executable, "args": [str(Path(__file__).with_name("apps") / "synthetic.py")]}
