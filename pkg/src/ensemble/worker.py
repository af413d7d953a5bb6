"""Worker runtime.

A worker receives work units from the manager, runs the named user function in
its working directory and reports one RESULT per unit. A reader thread owns the
endpoint's receive side for the worker's lifetime: it turns MAN_KILL messages
into the executor's kill flag and queues everything else for the main thread.

User functions are called as ``f(H, persis_info, specs, libE_info)`` and return
``(H_out, persis_info)`` or ``(H_out, persis_info, calc_status)``.
"""

from __future__ import annotations

import filecmp
import logging
import os
import queue
import shutil
import threading
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .comms.message import Message, PeerClosed
from .core import STOP_TAGS, CalcStatus, EnsembleError, IoFailure, SimSpecs, Tag
from .executor import Executor
from .history import decode_batch, encode_batch
from .registry import resolve
from .resources import WorkerResources

logger = logging.getLogger(__name__)


class StageCollision(EnsembleError):
    pass


@dataclass(frozen=True)
class WorkdirPolicy:
    use_workdirs: bool = False
    per_sim_dirs: bool = False
    copy_files: tuple = ()
    symlink_files: tuple = ()
    copy_back: bool = False

    def __post_init__(self):
        object.__setattr__(self, "copy_files", tuple(str(p) for p in self.copy_files))
        object.__setattr__(self, "symlink_files", tuple(str(p) for p in self.symlink_files))
        both = {Path(p).resolve() for p in self.copy_files} & {Path(p).resolve() for p in self.symlink_files}
        if both:
            raise ValueError(f"paths both copied and symlinked: {sorted(map(str, both))}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "WorkdirPolicy":
        d = dict(d or {})
        return cls(**{k: d[k] for k in ("use_workdirs", "per_sim_dirs", "copy_files", "symlink_files", "copy_back") if k in d})


def workdir_name(worker_id: int, sim_id: int | None, per_sim_dirs: bool) -> str:
    if per_sim_dirs and sim_id is not None:
        return f"sim{sim_id}_worker{worker_id}"
    return f"worker{worker_id}"


def _same_tree(a: Path, b: Path) -> bool:
    if a.is_file() or b.is_file():
        return a.is_file() and b.is_file() and filecmp.cmp(a, b, shallow=False)
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


def prepare_workdir(policy: WorkdirPolicy, sim_id, ensemble_dir, worker_id: int = 0, launch_dir=None) -> Path:
    """Create (or reuse) the directory a calculation runs in and stage its inputs."""
    if not policy.use_workdirs:
        return Path(launch_dir) if launch_dir is not None else Path.cwd()
    d = Path(ensemble_dir) / workdir_name(worker_id, sim_id, policy.per_sim_dirs)
    try:
        d.mkdir(parents=True, exist_ok=True)
        for src in map(Path, policy.copy_files):
            dst = d / src.name
            if dst.exists() or dst.is_symlink():
                if not _same_tree(src, dst):
                    raise StageCollision(f"{dst} exists with different content than {src}")
                continue
            if src.is_dir():
                shutil.copytree(src, dst)
            else:
                shutil.copy2(src, dst)
        for src in map(Path, policy.symlink_files):
            dst = d / src.name
            target = src.resolve()
            if dst.is_symlink() and dst.resolve() == target:
                continue
            if dst.exists() or dst.is_symlink():
                raise StageCollision(f"{dst} exists and is not a link to {target}")
            os.symlink(target, dst)
    except OSError as exc:
        raise IoFailure(f"cannot prepare {d}: {exc}") from exc
    return d


def _free_name(path: Path) -> Path:
    if not path.exists():
        return path
    n = 1
    while True:
        cand = path.with_name(f"{path.name}_{n}")
        if not cand.exists():
            return cand
        n += 1


def copy_back(policy: WorkdirPolicy, ensemble_dir, origin_dir, dirs=None) -> list[Path]:
    """Mirror working directories under ``<origin>/ensemble_back``. Errors are logged."""
    if not (policy.copy_back and policy.use_workdirs):
        return []
    ensemble_dir = Path(ensemble_dir)
    root = Path(origin_dir) / "ensemble_back"
    if dirs is None:
        dirs = [p for p in ensemble_dir.iterdir() if p.is_dir()] if ensemble_dir.exists() else []
    copied = []
    for d in sorted(map(Path, dirs)):
        try:
            dest = _free_name(root / d.relative_to(ensemble_dir))
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copytree(d, dest, symlinks=True)
            copied.append(dest)
        except (OSError, ValueError) as exc:
            logger.error("copy back of %s failed: %s", d, exc)
    return copied


# ----------------------------------------------------------------- RNG state


def rng_from(persis_info: dict) -> np.random.Generator:
    """The worker's random stream, resumed from ``persis_info`` when possible."""
    state = persis_info.get("rng_state")
    bitgen = np.random.PCG64(int(persis_info.get("rng_seed", 0)))
    if state is not None:
        bitgen.state = state
    return np.random.Generator(bitgen)


def store_rng(persis_info: dict, rng: np.random.Generator) -> dict:
    persis_info["rng_state"] = rng.bit_generator.state
    return persis_info


# ----------------------------------------------------------------- protocol


class _Reader(threading.Thread):
    """Sole receiver on the worker endpoint."""

    def __init__(self, endpoint, kill_event: threading.Event):
        super().__init__(name=f"reader-{endpoint.id}", daemon=True)
        self.ep = endpoint
        self.inbox: queue.Queue = queue.Queue()
        self.kill_event = kill_event
        self.lock = threading.Lock()
        self.assigned: set[int] = set()

    def run(self):
        while True:
            try:
                msg = self.ep.recv()
            except PeerClosed:
                self.inbox.put(None)
                return
            if msg.tag == Tag.MAN_KILL:
                ids = set(msg.payload.get("sim_ids", ()))
                with self.lock:
                    if ids & self.assigned:
                        self.kill_event.set()
                        logger.debug("worker %d: kill requested for %s", self.ep.id, sorted(ids))
                continue
            if msg.tag in (Tag.EVAL_SIM, Tag.EVAL_GEN):
                with self.lock:
                    self.assigned = set(msg.payload.get("sim_ids", ()))
                    self.kill_event.clear()
            self.inbox.put(msg)
            if msg.tag == Tag.STOP_TAG:
                return

    def done_with_unit(self):
        with self.lock:
            self.assigned = set()


class PersistentComm:
    """Channel a persistent user function uses to talk to the manager."""

    def __init__(self, endpoint, reader: _Reader):
        self.ep = endpoint
        self._reader = reader
        self.last_tag = None
        self.new_sim_ids: list[int] = []

    @property
    def worker_id(self) -> int:
        return self.ep.id

    def send(self, batch=None, cancel=()) -> None:
        payload = {"H": encode_batch(batch) if batch is not None and len(batch) else None, "cancel": [int(i) for i in cancel]}
        self.ep.send(Message(Tag.PERSIS_UPDATE, self.ep.id, 0, payload))

    def recv(self):
        msg = self._reader.inbox.get()
        if msg is None:
            raise PeerClosed(0)
        self.last_tag = msg.tag
        if msg.tag in STOP_TAGS:
            self.new_sim_ids = []
            return msg.tag, None
        self.new_sim_ids = list(msg.payload.get("new_sim_ids", ()))
        return msg.tag, decode_batch(msg.payload.get("H"))

    @property
    def stopped(self) -> bool:
        return self.last_tag in STOP_TAGS


def persis_send_recv(comm: PersistentComm, batch=None, cancel=()):
    """Send generated rows (and cancellation ids) and block for the manager's reply.

    Returns ``(tag, calc_in)``. On either stop tag ``calc_in`` is None and the
    caller must leave its loop and return ``CalcStatus.PERSIS_FINISHED``.
    After a data reply, ``comm.new_sim_ids`` lists the ids given to ``batch``.
    """
    comm.send(batch, cancel)
    return comm.recv()


# ----------------------------------------------------------------- main loop


@dataclass
class WorkerSetup:
    sim_specs: SimSpecs | None
    gen_specs: SimSpecs | None
    policy: WorkdirPolicy = field(default_factory=WorkdirPolicy)
    ensemble_dir: str = "ensemble"
    origin_dir: str = "."
    apps: dict = field(default_factory=dict)
    executor_opts: dict = field(default_factory=dict)
    chdir: bool = True


def _split_return(ret):
    if not isinstance(ret, tuple):
        return ret, None, CalcStatus.COMPLETED
    if len(ret) == 2:
        return ret[0], ret[1], CalcStatus.COMPLETED
    if len(ret) == 3:
        return ret[0], ret[1], CalcStatus(ret[2] if ret[2] is not None else CalcStatus.COMPLETED)
    raise TypeError(f"user function returned a tuple of length {len(ret)}")


class _Worker:
    def __init__(self, endpoint, setup: WorkerSetup):
        self.ep = endpoint
        self.id = endpoint.id
        self.setup = setup
        self.kill_event = threading.Event()
        self.reader = _Reader(endpoint, self.kill_event)
        self.executor = Executor(self.id, kill_event=self.kill_event, **setup.executor_opts)
        self.executor.register_apps(setup.apps)
        self.launch_dir = Path(setup.origin_dir).resolve()
        self.created: list[Path] = []

    def run(self):
        self.reader.start()
        try:
            while True:
                msg = self.reader.inbox.get()
                if msg is None:
                    logger.info("worker %d: manager went away", self.id)
                    return
                if msg.tag == Tag.STOP_TAG:
                    return
                if msg.tag in (Tag.EVAL_SIM, Tag.EVAL_GEN):
                    if self._calc(msg) == Tag.STOP_TAG:
                        return
                else:
                    logger.debug("worker %d: ignoring %s while idle", self.id, msg.tag)
        finally:
            self.executor.kill_all()
            copy_back(self.setup.policy, self.setup.ensemble_dir, self.setup.origin_dir, self.created)

    def _workdir(self, calc_type: str, sim_ids) -> Path:
        s = self.setup
        if calc_type != "sim" or not s.policy.use_workdirs:
            return Path(s.ensemble_dir).resolve() if s.policy.use_workdirs else self.launch_dir
        d = prepare_workdir(s.policy, sim_ids[0] if sim_ids else None, Path(s.ensemble_dir).resolve(), self.id, self.launch_dir)
        if d not in self.created:
            self.created.append(d)
        return d

    def _calc(self, msg: Message):
        p = msg.payload
        calc_type = p["calc_type"]
        sim_ids = list(p.get("sim_ids", ()))
        persistent = bool(p.get("persistent"))
        specs = self.setup.sim_specs if calc_type == "sim" else self.setup.gen_specs
        persis_info = p.get("persis_info") or {}
        resources = WorkerResources.from_json(p.get("resources"))
        comm = PersistentComm(self.ep, self.reader) if persistent else None
        start = time.perf_counter()
        status, H_out, error = CalcStatus.FAILED, None, None
        prev = os.getcwd()
        try:
            workdir = self._workdir(calc_type, sim_ids)
            if self.setup.chdir and workdir != self.launch_dir:
                os.chdir(workdir)
            self.executor.resources = resources
            self.executor.cwd = workdir
            info = dict(p.get("libE_info") or {})
            info.update(
                workerID=self.id,
                sim_ids=sim_ids,
                persistent=persistent,
                comm=comm,
                executor=self.executor,
                resources=resources,
                workdir=str(workdir),
                kill_requested=self.kill_event.is_set,
            )
            func = resolve(specs.function)
            H_in = decode_batch(p.get("H"))
            H_out, new_info, status = _split_return(func(H_in, persis_info, specs, info))
            if new_info is not None:
                persis_info = new_info
        except Exception as exc:
            error = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
            logger.error("worker %d: %s function raised %s", self.id, calc_type, exc)
            status = CalcStatus.FAILED
        finally:
            if self.setup.chdir and os.getcwd() != prev:
                os.chdir(prev)
        elapsed = time.perf_counter() - start
        self.executor.kill_all()
        try:
            H_payload = encode_batch(H_out) if (isinstance(H_out, np.ndarray) and error is None) else None
        except Exception as exc:
            error = f"unencodable output: {exc}"
            H_payload, status = None, CalcStatus.FAILED
        reply = {
            "calc_type": calc_type,
            "sim_ids": sim_ids,
            "H": H_payload,
            "persis_info": _jsonable(persis_info),
            "calc_status": int(status),
            "calc_time": elapsed,
            "error": error,
        }
        self.reader.done_with_unit()
        try:
            self.ep.send(Message(Tag.RESULT, self.id, 0, reply))
        except PeerClosed:
            return Tag.STOP_TAG
        if comm is not None and comm.last_tag == Tag.STOP_TAG:
            return Tag.STOP_TAG
        return None


def _jsonable(info: dict) -> dict:
    out = {}
    for k, v in (info or {}).items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, np.generic):
            v = v.item()
        elif isinstance(v, np.random.Generator):
            continue
        out[str(k)] = v
    return out


def worker_loop(endpoint, setup: WorkerSetup) -> None:
    """Serve work units until STOP_TAG (or the manager disappears)."""
    _Worker(endpoint, setup).run()
