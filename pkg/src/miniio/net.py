"""Length-prefixed framed messaging over loopback byte streams.

Frame layout: u32 little-endian payload length, u8 message type, payload.
Several message kinds carry a JSON object followed by binary data; those
payloads are encoded as u32 little-endian JSON length, JSON bytes, body.

A per-message latency (``comm_latency_us``) can be injected at the sender to
model inter-node wire costs.
"""
from __future__ import annotations

import json
import socket
import struct
import threading
import time

from .errors import ProtocolError

MAX_FRAME = 1 << 30

# Public staging protocol (wire contract, version 1)
HELLO_R = 1
HELLO_W = 2
STEP_ANNOUNCE = 3
GET_REQ = 4
DATA = 5
STEP_RELEASE = 6
CLOSE = 7
ERR = 8

PROTOCOL_VERSION = 1

# Internal messages (coordinator bus, fan-in, redistribution).  Kept in a
# disjoint numeric space from the public protocol.
JOIN = 100
SETUP = 101
ENDPOINTS = 102
ENDPOINT_MAP = 103
READY = 104
GO = 105
PUT_BLOCK = 110
BLOCK_ACK = 111
END_STEP = 112
STEP_OK = 113
FRAGMENT = 114
COMMIT = 115
P1_DATA = 120
P1_DONE = 121
P2_GO = 122
P2_DONE = 123
STEP_DONE = 124
ADMIT = 130
DISCARD = 131
RELEASED = 132
SEG_READY = 133
STALLED = 134
REPORT = 140
FIN = 141
ABORT = 142


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        m = sock.recv_into(view[got:], n - got)
        if m == 0:
            raise EOFError("peer closed connection")
        got += m
    return bytes(buf)


class Channel:
    """One framed byte-stream connection.

    ``send`` is thread-safe; ``recv`` must be called from a single consumer.
    """

    def __init__(self, sock: socket.socket, latency_us: float = 0.0):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.latency_s = (latency_us or 0.0) / 1e6
        self._send_lock = threading.Lock()

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        header = struct.pack("<IB", len(payload), msg_type)
        with self._send_lock:
            if self.latency_s:
                time.sleep(self.latency_s)
            self.sock.sendall(header + payload)

    def send_obj(self, msg_type: int, obj: dict, body: bytes = b"") -> None:
        meta = json.dumps(obj, separators=(",", ":")).encode()
        payload = struct.pack("<I", len(meta)) + meta + body
        self.send(msg_type, payload)

    def send_json(self, msg_type: int, obj: dict) -> None:
        """Public-protocol control frame: the payload is plain UTF-8 JSON."""
        self.send(msg_type, json.dumps(obj, separators=(",", ":")).encode())

    def recv(self) -> tuple[int, bytes]:
        head = recv_exact(self.sock, 5)
        length, msg_type = struct.unpack("<IB", head)
        if length > MAX_FRAME:
            raise ProtocolError(f"frame of {length} bytes exceeds limit")
        payload = recv_exact(self.sock, length) if length else b""
        return msg_type, payload

    def recv_expect(self, *types: int) -> tuple[int, bytes]:
        msg_type, payload = self.recv()
        if msg_type not in types:
            raise ProtocolError(f"expected message type {types}, got {msg_type}")
        return msg_type, payload

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def split_obj(payload: bytes) -> tuple[dict, bytes]:
    """Split a JSON+body payload produced by :meth:`Channel.send_obj`."""
    if len(payload) < 4:
        raise ProtocolError("payload too short for JSON header")
    (meta_len,) = struct.unpack_from("<I", payload)
    if 4 + meta_len > len(payload):
        raise ProtocolError("JSON header length exceeds payload")
    obj = json.loads(payload[4:4 + meta_len])
    return obj, payload[4 + meta_len:]


def listener(host: str = "127.0.0.1", port: int = 0, backlog: int = 64) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(backlog)
    return srv


def connect(host: str, port: int, latency_us: float = 0.0,
            timeout_s: float = 20.0) -> Channel:
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout_s)
            sock.settimeout(None)
            return Channel(sock, latency_us)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.02)
