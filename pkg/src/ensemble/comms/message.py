"""Tagged messages and their byte encoding.

Message bytes: 1-byte tag, 4-byte big-endian source id, 4-byte big-endian
destination id, then a UTF-8 JSON body. Over TCP each message is prefixed by a
4-byte big-endian length.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..core import EnsembleError, Tag

HEADER = struct.Struct(">BII")
LENGTH = struct.Struct(">I")
MAX_FRAME = 1 << 30
HANDSHAKE_TAG = 0
PROTO_VERSION = 1


class CommsError(EnsembleError):
    pass


class PeerClosed(CommsError):
    def __init__(self, peer=None, detail=""):
        msg = "peer closed" if peer is None else f"peer {peer} closed"
        super().__init__(f"{msg} {detail}".rstrip())
        self.peer = peer


class BindFailure(CommsError):
    pass


class SpawnFailure(CommsError):
    pass


class FrameError(CommsError):
    pass


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


@dataclass
class Message:
    tag: int
    source: int = 0
    dest: int = 0
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.tag = Tag(self.tag)
        except ValueError:
            self.tag = int(self.tag)

    def to_bytes(self) -> bytes:
        body = json.dumps(self.payload, separators=(",", ":"), default=_json_default)
        return HEADER.pack(int(self.tag), self.source, self.dest) + body.encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "Message":
        if len(data) < HEADER.size:
            raise FrameError(f"message of {len(data)} bytes is shorter than its header")
        tag, source, dest = HEADER.unpack_from(data)
        try:
            payload = json.loads(data[HEADER.size:].decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise FrameError(f"undecodable message body: {exc}") from exc
        return cls(tag, source, dest, payload)


def frame(data: bytes) -> bytes:
    return LENGTH.pack(len(data)) + data


class FrameDecoder:
    """Reassembles length-prefixed frames from an arbitrarily fragmented byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[bytes]:
        self._buf += chunk
        out = []
        while len(self._buf) >= LENGTH.size:
            (n,) = LENGTH.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise FrameError(f"frame of {n} bytes exceeds limit")
            if len(self._buf) < LENGTH.size + n:
                break
            out.append(bytes(self._buf[LENGTH.size : LENGTH.size + n]))
            del self._buf[: LENGTH.size + n]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
