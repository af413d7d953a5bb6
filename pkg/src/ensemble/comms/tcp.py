"""TCP transport: length-prefixed frames over one stream socket per worker.

Workers connect to the manager's listening socket and open with a handshake
frame (tag 0, body ``{"worker_id": k, "proto": 1}``); the manager answers with
tag 0 and ``{"ok": true}``.
"""

from __future__ import annotations

import select
import selectors
import socket
import time

from ..core import Timeout
from .base import ManagerEndpoint, WorkerEndpoint
from .message import (
    HANDSHAKE_TAG,
    PROTO_VERSION,
    BindFailure,
    FrameDecoder,
    Message,
    PeerClosed,
    SpawnFailure,
    frame,
)

_CHUNK = 1 << 16


def listen(host: str = "127.0.0.1", port: int = 0, backlog: int = 128) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
        sock.listen(backlog)
    except OSError as exc:
        sock.close()
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    return sock


def _recv_frame(sock: socket.socket, decoder: FrameDecoder, pending: list, deadline: float | None) -> bytes:
    # Waits with select so the socket itself stays blocking for concurrent senders.
    while not pending:
        left = None if deadline is None else max(deadline - time.monotonic(), 0.0)
        ready, _, _ = select.select([sock], [], [], left)
        if not ready:
            raise Timeout("no frame before deadline")
        try:
            chunk = sock.recv(_CHUNK)
        except OSError as exc:
            raise PeerClosed(detail=f"({exc})") from exc
        if not chunk:
            raise PeerClosed(detail="(connection closed)")
        pending.extend(decoder.feed(chunk))
    return pending.pop(0)


class TcpManagerEndpoint(ManagerEndpoint):
    def __init__(self, socks: dict[int, socket.socket]):
        super().__init__(socks.keys())
        self._socks = dict(socks)
        self._decoders = {w: FrameDecoder() for w in socks}
        self._sel = selectors.DefaultSelector()
        for w, s in socks.items():
            s.settimeout(None)
            self._sel.register(s, selectors.EVENT_READ, w)

    @classmethod
    def accept(cls, server: socket.socket, nworkers: int, timeout: float = 30.0) -> "TcpManagerEndpoint":
        """Accept and handshake ``nworkers`` connections on a listening socket."""
        deadline = time.monotonic() + timeout
        socks: dict[int, socket.socket] = {}
        try:
            while len(socks) < nworkers:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise SpawnFailure(f"only {len(socks)} of {nworkers} workers connected within {timeout}s")
                server.settimeout(left)
                try:
                    conn, _ = server.accept()
                except socket.timeout:
                    continue
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                try:
                    hello = Message.from_bytes(_recv_frame(conn, FrameDecoder(), [], deadline))
                except (Timeout, PeerClosed) as exc:
                    conn.close()
                    raise SpawnFailure(f"handshake failed: {exc}") from exc
                wid = hello.payload.get("worker_id")
                if (
                    hello.tag != HANDSHAKE_TAG
                    or hello.payload.get("proto") != PROTO_VERSION
                    or not isinstance(wid, int)
                    or not 1 <= wid <= nworkers
                    or wid in socks
                ):
                    conn.close()
                    raise SpawnFailure(f"bad handshake {hello!r}")
                conn.settimeout(None)
                conn.sendall(frame(Message(HANDSHAKE_TAG, 0, wid, {"ok": True}).to_bytes()))
                socks[wid] = conn
        except BaseException:
            for s in socks.values():
                s.close()
            raise
        return cls(socks)

    def _pump(self, timeout):
        if not self._sel.get_map():
            return
        for key, _ in self._sel.select(timeout):
            w = key.data
            try:
                chunk = key.fileobj.recv(_CHUNK)
            except OSError:
                chunk = b""
            if not chunk:
                self._sel.unregister(key.fileobj)
                self._mark_closed(w)
                continue
            for data in self._decoders[w].feed(chunk):
                self._deliver(w, data)

    def _send_bytes(self, dest, data):
        try:
            self._socks[dest].sendall(frame(data))
        except OSError as exc:
            raise PeerClosed(dest, f"({exc})") from exc

    def close(self):
        self._sel.close()
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


class TcpWorkerEndpoint(WorkerEndpoint):
    def __init__(self, sock: socket.socket, worker_id: int):
        self._sock = sock
        self.id = worker_id
        self._decoder = FrameDecoder()
        self._pending: list[bytes] = []

    @classmethod
    def connect(cls, host: str, port: int, worker_id: int, timeout: float = 30.0) -> "TcpWorkerEndpoint":
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=max(deadline - time.monotonic(), 0.1))
                sock.settimeout(None)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise SpawnFailure(f"cannot reach manager at {host}:{port}: {exc}") from exc
                time.sleep(0.05)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        ep = cls(sock, worker_id)
        sock.sendall(frame(Message(HANDSHAKE_TAG, worker_id, 0, {"worker_id": worker_id, "proto": PROTO_VERSION}).to_bytes()))
        try:
            reply = Message.from_bytes(_recv_frame(sock, ep._decoder, ep._pending, deadline))
        except Timeout as exc:
            sock.close()
            raise SpawnFailure("no handshake reply from manager") from exc
        if reply.tag != HANDSHAKE_TAG or reply.payload.get("ok") is not True:
            sock.close()
            raise SpawnFailure(f"handshake rejected: {reply.payload}")
        return ep

    def send(self, msg: Message) -> None:
        try:
            self._sock.sendall(frame(msg.to_bytes()))
        except OSError as exc:
            raise PeerClosed(0, f"({exc})") from exc

    def recv(self, timeout=None) -> Message:
        deadline = None if timeout is None else time.monotonic() + max(timeout, 0.0)
        try:
            return Message.from_bytes(_recv_frame(self._sock, self._decoder, self._pending, deadline))
        except PeerClosed as exc:
            raise PeerClosed(0, "(manager connection closed)") from exc

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
