from __future__ import annotations

import itertools
import time
from abc import ABC, abstractmethod
from collections import deque

from ..core import Timeout
from .message import Message, PeerClosed


def _deadline(timeout):
    return None if timeout is None else time.monotonic() + max(timeout, 0.0)


def _remaining(deadline):
    return None if deadline is None else max(deadline - time.monotonic(), 0.0)


class WorkerEndpoint(ABC):
    """A worker's single channel to the manager."""

    id: int

    @abstractmethod
    def send(self, msg: Message) -> None: ...

    @abstractmethod
    def recv(self, timeout: float | None = None) -> Message:
        """Next message from the manager; raises Timeout or PeerClosed."""

    @abstractmethod
    def close(self) -> None: ...


class ManagerEndpoint(ABC):
    """Manager side: multiplexes one channel per worker.

    Subclasses implement ``_pump`` which waits up to ``timeout`` for incoming
    bytes and hands decoded messages to ``_deliver``; closed channels are
    reported through ``_mark_closed``.
    """

    def __init__(self, worker_ids):
        self.worker_ids = list(worker_ids)
        self._inbox = {w: deque() for w in self.worker_ids}
        self._closed = set()
        self._reported = set()
        self._seq = itertools.count()

    @abstractmethod
    def _pump(self, timeout: float | None) -> None: ...

    @abstractmethod
    def _send_bytes(self, dest: int, data: bytes) -> None: ...

    @abstractmethod
    def close(self) -> None: ...

    def _deliver(self, source: int, data: bytes) -> None:
        self._inbox[source].append((next(self._seq), Message.from_bytes(data)))

    def _mark_closed(self, source: int) -> None:
        self._closed.add(source)

    def send(self, msg: Message) -> None:
        if msg.dest not in self._inbox:
            raise ValueError(f"unknown destination worker {msg.dest}")
        if msg.dest in self._closed:
            raise PeerClosed(msg.dest)
        self._send_bytes(msg.dest, msg.to_bytes())

    def probe(self) -> set[int]:
        """Workers with at least one message waiting. Consumes nothing."""
        self._pump(0)
        return {w for w, q in self._inbox.items() if q}

    @property
    def closed_peers(self) -> set[int]:
        return set(self._closed)

    def _take(self, sources):
        best = None
        for w in sources:
            q = self._inbox[w]
            if q and (best is None or q[0][0] < self._inbox[best][0][0]):
                best = w
        if best is not None:
            return self._inbox[best].popleft()[1]
        for w in sources:
            if w in self._closed and w not in self._reported:
                self._reported.add(w)
                raise PeerClosed(w)
        if all(w in self._closed for w in sources):
            if len(sources) == 1:
                raise PeerClosed(sources[0])
            raise PeerClosed(None, "(all peers closed)")
        return None

    def _recv(self, sources, timeout):
        deadline = _deadline(timeout)
        while True:
            msg = self._take(sources)
            if msg is not None:
                return msg
            left = _remaining(deadline)
            if left == 0.0:
                self._pump(0)
                msg = self._take(sources)
                if msg is not None:
                    return msg
                raise Timeout(f"no message within {timeout}s")
            self._pump(left)

    def recv(self, timeout: float | None = None) -> Message:
        """Oldest pending message from any worker."""
        return self._recv(self.worker_ids, timeout)

    def recv_from(self, worker_id: int, timeout: float | None = None) -> Message:
        return self._recv([worker_id], timeout)
