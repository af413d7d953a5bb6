"""Local multi-process transport over ``multiprocessing`` pipes."""

from __future__ import annotations

from multiprocessing.connection import Connection, wait

from ..core import Timeout
from .base import ManagerEndpoint, WorkerEndpoint
from .message import Message, PeerClosed


class LocalManagerEndpoint(ManagerEndpoint):
    def __init__(self, conns: dict[int, Connection]):
        super().__init__(conns.keys())
        self._conns = dict(conns)
        self._by_conn = {c: w for w, c in conns.items()}

    def _pump(self, timeout):
        live = [c for w, c in self._conns.items() if w not in self._closed]
        if not live:
            return
        for conn in wait(live, timeout):
            w = self._by_conn[conn]
            try:
                while True:
                    self._deliver(w, conn.recv_bytes())
                    if not conn.poll(0):
                        break
            except (EOFError, OSError):
                self._mark_closed(w)

    def _send_bytes(self, dest, data):
        try:
            self._conns[dest].send_bytes(data)
        except (BrokenPipeError, EOFError, OSError) as exc:
            self._mark_closed(dest)
            raise PeerClosed(dest, f"({exc})") from exc

    def close(self):
        for c in self._conns.values():
            c.close()


class LocalWorkerEndpoint(WorkerEndpoint):
    def __init__(self, conn: Connection, worker_id: int):
        self._conn = conn
        self.id = worker_id

    def send(self, msg: Message) -> None:
        try:
            self._conn.send_bytes(msg.to_bytes())
        except (BrokenPipeError, EOFError, OSError) as exc:
            raise PeerClosed(0, f"({exc})") from exc

    def recv(self, timeout=None) -> Message:
        try:
            if timeout is not None and not self._conn.poll(max(timeout, 0.0)):
                raise Timeout(f"no message within {timeout}s")
            return Message.from_bytes(self._conn.recv_bytes())
        except (EOFError, OSError) as exc:
            raise PeerClosed(0, f"({exc})") from exc

    def close(self) -> None:
        self._conn.close()
