"""Length-prefixed JSON frames over stream sockets.

Frame = 4-byte big-endian payload length + UTF-8 JSON body.  Used by both
the broker protocol and the worker->coordinator event relay.
"""

from __future__ import annotations

import json
import socket
import struct

MAX_FRAME = 64 * 1024 * 1024

_LEN = struct.Struct(">I")


class ConnectionClosed(Exception):
    """Peer closed the stream mid-frame (or cleanly between frames)."""

    def __init__(self, clean: bool = False):
        self.clean = clean
        super().__init__("connection closed" + (" (clean)" if clean else ""))


def send_frame(sock: socket.socket, body: dict) -> None:
    raw = json.dumps(body).encode("utf-8")
    if len(raw) > MAX_FRAME:
        raise ValueError(f"frame of {len(raw)} bytes exceeds limit")
    sock.sendall(_LEN.pack(len(raw)) + raw)


def _recv_exact(sock: socket.socket, n: int, clean_ok: bool) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionClosed(clean=clean_ok and remaining == n)
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> dict:
    header = _recv_exact(sock, _LEN.size, clean_ok=True)
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise ValueError(f"peer announced a {length}-byte frame")
    return json.loads(_recv_exact(sock, length, clean_ok=False).decode("utf-8"))
