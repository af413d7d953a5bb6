"""In-process transport: workers are threads, channels are locked deques.

Messages still travel as encoded bytes so the semantics match the other
backends exactly (manager is id 0, workers 1..n).
"""

from __future__ import annotations

import threading
from collections import deque

from ..core import Timeout
from .base import ManagerEndpoint, WorkerEndpoint, _deadline, _remaining
from .message import Message, PeerClosed


class _Hub:
    def __init__(self, worker_ids):
        self.cond = threading.Condition()
        self.up = {w: deque() for w in worker_ids}
        self.down = {w: deque() for w in worker_ids}
        self.manager_closed = False
        self.worker_closed = set()


class InprocManagerEndpoint(ManagerEndpoint):
    def __init__(self, hub: _Hub):
        super().__init__(hub.up.keys())
        self._hub = hub

    def _collect(self) -> bool:
        got = False
        for w, q in self._hub.up.items():
            while q:
                self._deliver(w, q.popleft())
                got = True
            if w in self._hub.worker_closed and w not in self._closed:
                self._mark_closed(w)
                got = True
        return got

    def _pump(self, timeout):
        hub = self._hub
        with hub.cond:
            if self._collect() or timeout == 0:
                return
            hub.cond.wait_for(self._collect, timeout)

    def _send_bytes(self, dest, data):
        hub = self._hub
        with hub.cond:
            if hub.manager_closed:
                raise PeerClosed(0, "(manager endpoint closed)")
            if dest in hub.worker_closed:
                raise PeerClosed(dest)
            hub.down[dest].append(data)
            hub.cond.notify_all()

    def close(self):
        with self._hub.cond:
            self._hub.manager_closed = True
            self._hub.cond.notify_all()


class InprocWorkerEndpoint(WorkerEndpoint):
    def __init__(self, hub: _Hub, worker_id: int):
        self._hub = hub
        self.id = worker_id

    def send(self, msg: Message) -> None:
        hub = self._hub
        with hub.cond:
            if hub.manager_closed:
                raise PeerClosed(0)
            if self.id in hub.worker_closed:
                raise PeerClosed(self.id, "(endpoint closed)")
            hub.up[self.id].append(msg.to_bytes())
            hub.cond.notify_all()

    def recv(self, timeout=None) -> Message:
        hub = self._hub
        q = hub.down[self.id]
        deadline = _deadline(timeout)
        with hub.cond:
            while not q:
                if hub.manager_closed:
                    raise PeerClosed(0)
                left = _remaining(deadline)
                if left == 0.0:
                    raise Timeout(f"no message within {timeout}s")
                hub.cond.wait(left)
            return Message.from_bytes(q.popleft())

    def close(self) -> None:
        with self._hub.cond:
            self._hub.worker_closed.add(self.id)
            self._hub.cond.notify_all()


def create(nworkers: int):
    hub = _Hub(range(1, nworkers + 1))
    return InprocManagerEndpoint(hub), {w: InprocWorkerEndpoint(hub, w) for w in range(1, nworkers + 1)}
