"""Manager/worker transports.

Three interchangeable backends share one delivery contract (per-pair FIFO,
exact payload round trip, ``Timeout`` without consumption, ``PeerClosed`` on
shutdown):

* ``inproc`` -- worker threads in this process,
* ``local``  -- forked worker processes connected by pipes,
* ``tcp``    -- workers connect to a listening socket (possibly from elsewhere).
"""

from __future__ import annotations

import logging
import multiprocessing
import threading
from dataclasses import dataclass, field

from . import inproc
from .base import ManagerEndpoint, WorkerEndpoint
from .local import LocalManagerEndpoint, LocalWorkerEndpoint
from .message import (
    BindFailure,
    CommsError,
    FrameDecoder,
    FrameError,
    Message,
    PeerClosed,
    SpawnFailure,
    frame,
)
from .tcp import TcpManagerEndpoint, TcpWorkerEndpoint, listen

logger = logging.getLogger(__name__)

MODES = ("inproc", "local", "tcp")

__all__ = [
    "MODES",
    "BindFailure",
    "CommsError",
    "FrameDecoder",
    "FrameError",
    "ManagerEndpoint",
    "Message",
    "PeerClosed",
    "SpawnFailure",
    "Transport",
    "WorkerEndpoint",
    "frame",
    "start_transport",
]


@dataclass
class Transport:
    mode: str
    nworkers: int
    manager: ManagerEndpoint
    workers: dict[int, WorkerEndpoint] = field(default_factory=dict)
    handles: list = field(default_factory=list)
    address: tuple | None = None

    def alive(self) -> list:
        return [h for h in self.handles if h.is_alive()]

    def join(self, timeout: float | None = None) -> bool:
        for h in self.handles:
            h.join(timeout)
        return not self.alive()

    def shutdown(self, timeout: float = 10.0) -> None:
        """Wait for workers to exit, forcing stragglers, then close every channel."""
        self.join(timeout)
        for h in self.alive():
            if isinstance(h, multiprocessing.process.BaseProcess):
                logger.warning("worker process %s did not exit; terminating", h.pid)
                h.terminate()
                h.join(2.0)
                if h.is_alive():
                    h.kill()
                    h.join()
            else:
                logger.warning("worker thread %s did not exit", h.name)
        self.manager.close()
        for ep in self.workers.values():
            ep.close()


def _run_target(ep, target, args):
    try:
        target(ep, *args)
    finally:
        ep.close()


def _local_child(conn, wid, inherited, target, args):
    for c in inherited:
        c.close()
    _run_target(LocalWorkerEndpoint(conn, wid), target, args)


def _tcp_child(host, port, wid, server, timeout, target, args):
    server.close()
    _run_target(TcpWorkerEndpoint.connect(host, port, wid, timeout), target, args)


def start_transport(mode: str, nworkers: int, config: dict | None = None, target=None, args=()) -> Transport:
    """Create a manager endpoint and ``nworkers`` worker endpoints (ids 1..n).

    With ``target`` each worker runs ``target(endpoint, *args)`` in its own
    thread (inproc) or process (local, tcp). Without it the worker endpoints are
    returned in ``Transport.workers`` for the caller to drive.
    """
    config = dict(config or {})
    if nworkers < 1:
        raise ValueError("nworkers must be >= 1")
    if mode not in MODES:
        raise ValueError(f"unknown comms mode {mode!r}; expected one of {MODES}")
    ids = range(1, nworkers + 1)

    if mode == "inproc":
        mgr, eps = inproc.create(nworkers)
        if target is None:
            return Transport(mode, nworkers, mgr, eps)
        threads = []
        for w in ids:
            t = threading.Thread(target=_run_target, args=(eps[w], target, args), name=f"worker-{w}", daemon=True)
            t.start()
            threads.append(t)
        return Transport(mode, nworkers, mgr, {}, threads)

    ctx = multiprocessing.get_context("fork")

    if mode == "local":
        parent_ends, procs, workers = {}, [], {}
        for w in ids:
            mine, theirs = multiprocessing.Pipe(duplex=True)
            parent_ends[w] = mine
            if target is None:
                workers[w] = LocalWorkerEndpoint(theirs, w)
                continue
            p = ctx.Process(
                target=_local_child,
                args=(theirs, w, list(parent_ends.values()), target, args),
                name=f"worker-{w}",
                daemon=False,
            )
            try:
                p.start()
            except OSError as exc:
                for proc in procs:
                    proc.terminate()
                raise SpawnFailure(f"cannot start worker {w}: {exc}") from exc
            theirs.close()
            procs.append(p)
        return Transport(mode, nworkers, LocalManagerEndpoint(parent_ends), workers, procs)

    server = listen(config.get("host", "127.0.0.1"), int(config.get("port", 0)))
    bound = server.getsockname()
    host = config.get("connect_host", bound[0])
    port = int(config.get("connect_port", bound[1]))
    timeout = float(config.get("accept_timeout", 30.0))
    launch = config.get("launch", True)
    procs, workers, threads = [], {}, []
    try:
        if target is not None and launch:
            for w in ids:
                p = ctx.Process(target=_tcp_child, args=(host, port, w, server, timeout, target, args), name=f"worker-{w}")
                p.start()
                procs.append(p)
        elif target is None and launch:
            lock = threading.Lock()
            errors = []

            def connect(w):
                try:
                    ep = TcpWorkerEndpoint.connect(host, port, w, timeout)
                    with lock:
                        workers[w] = ep
                except Exception as exc:  # surfaced below
                    errors.append(exc)

            threads = [threading.Thread(target=connect, args=(w,), daemon=True) for w in ids]
            for t in threads:
                t.start()
        mgr = TcpManagerEndpoint.accept(server, nworkers, timeout)
        for t in threads:
            t.join()
        if threads and errors:
            raise SpawnFailure(f"worker connection failed: {errors[0]}")
    except BaseException:
        for p in procs:
            p.terminate()
        raise
    finally:
        server.close()
    return Transport(mode, nworkers, mgr, dict(sorted(workers.items())), procs, address=bound)
