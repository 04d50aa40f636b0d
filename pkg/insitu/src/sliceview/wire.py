"""Independent implementation of the staging wire protocol (version 1).

Frames are u32 little-endian payload length, u8 message type, payload.
Control messages carry UTF-8 JSON; DATA replies carry a u32-LE
length-prefixed stored-payload header JSON followed by the body bytes.
"""
from __future__ import annotations

import json
import socket
import struct

from .formats import ELEM_SIZES, NP_DTYPES, decode_body, slice_from_blocks

HELLO_R = 1
HELLO_W = 2
STEP_ANNOUNCE = 3
GET_REQ = 4
DATA = 5
STEP_RELEASE = 6
CLOSE = 7
ERR = 8

VERSION = 1


class ProtocolError(Exception):
    pass


class Timeout(Exception):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise Timeout(f"no data within the socket timeout") from None
        if not chunk:
            raise ProtocolError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock: socket.socket, msg_type: int, payload: bytes = b"") -> None:
    sock.sendall(struct.pack("<IB", len(payload), msg_type) + payload)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    length, msg_type = struct.unpack("<IB", _recv_exact(sock, 5))
    return msg_type, _recv_exact(sock, length) if length else b""


def send_json(sock: socket.socket, msg_type: int, obj: dict) -> None:
    send_frame(sock, msg_type, json.dumps(obj, separators=(",", ":")).encode())


class StreamSource:
    """Stepping-mode client for a live staging endpoint.

    begin_step() blocks for the next announcement; slice_plane() pulls only
    the blocks intersecting the requested level; end_step() releases the
    step so the producer can drop its buffers.
    """

    def __init__(self, endpoint: str, timeout_s: float = 30.0):
        host, _, port = endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise ProtocolError(f"bad endpoint {endpoint!r}")
        self.timeout_s = timeout_s
        self.control = self._connect_with_retry(host, int(port))
        self.control.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.protocol_errors = 0
        send_json(self.control, HELLO_R,
                  {"version": VERSION, "hostname": socket.gethostname()})
        msg_type, payload = recv_frame(self.control)
        if msg_type == ERR:
            self.protocol_errors += 1
            raise ProtocolError(f"handshake rejected: {json.loads(payload)}")
        if msg_type != HELLO_W:
            self.protocol_errors += 1
            raise ProtocolError(f"expected HELLO_W, got type {msg_type}")
        hello = _strip_json(payload)
        if hello.get("version") != VERSION:
            raise ProtocolError(f"unsupported writer version {hello.get('version')}")
        self.variables = {v["name"]: (v["dtype"], tuple(v["shape"]))
                          for v in hello["variables"]}
        self.dataplane = hello["dataplane"]
        self.world_size = int(hello["world_size"])
        self._data_socks: dict[int, socket.socket] = {}
        self._current: dict | None = None

    def _connect_with_retry(self, host: str, port: int) -> socket.socket:
        # the producer may still be starting up; keep knocking until the
        # timeout elapses
        import time
        deadline = time.monotonic() + self.timeout_s
        while True:
            try:
                return socket.create_connection((host, port),
                                                timeout=self.timeout_s)
            except OSError:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(0.05)

    # -- stepping ---------------------------------------------------------

    def steps(self):
        while True:
            step = self.begin_step()
            if step is None:
                return
            yield step["step"], step["blocks"]
            self.end_step()

    def begin_step(self) -> dict | None:
        msg_type, payload = recv_frame(self.control)
        if msg_type == CLOSE:
            return None
        if msg_type != STEP_ANNOUNCE:
            self.protocol_errors += 1
            raise ProtocolError(f"expected STEP_ANNOUNCE, got type {msg_type}")
        self._current = json.loads(payload)
        return self._current

    def end_step(self) -> None:
        if self._current is None:
            raise ProtocolError("no step in progress")
        send_json(self.control, STEP_RELEASE, {"step": self._current["step"]})
        self._current = None

    # -- block fetch --------------------------------------------------------

    def _fetch(self, block: dict) -> bytes:
        dtype, _ = self.variables[block["var"]]
        elem_size = ELEM_SIZES[dtype]
        if self.dataplane["kind"] == "shm":
            path = self.dataplane["pattern"].format(rank=block["rank"],
                                                    step=block["step"])
            try:
                with open(path, "rb") as f:
                    f.seek(block["offset"])
                    body = f.read(block["stored"])
            except FileNotFoundError:
                self.protocol_errors += 1
                raise ProtocolError(f"segment {path} missing") from None
            return decode_body(body, block["codec"], block["level"],
                               block["shuffle"], block["raw"], elem_size)
        sock = self._data_socket(block["rank"])
        send_json(sock, GET_REQ, {"step": block["step"], "var": block["var"],
                                  "rank": block["rank"]})
        msg_type, payload = recv_frame(sock)
        if msg_type == ERR:
            self.protocol_errors += 1
            raise ProtocolError(f"writer error: {json.loads(payload)}")
        if msg_type != DATA:
            self.protocol_errors += 1
            raise ProtocolError(f"expected DATA, got type {msg_type}")
        (hdr_len,) = struct.unpack_from("<I", payload)
        header = json.loads(payload[4:4 + hdr_len])
        body = payload[4 + hdr_len:]
        return decode_body(body, header["codec"], header["level"],
                           header["shuffle"], header["raw_nbytes"],
                           header["elem_size"])

    def _data_socket(self, rank: int) -> socket.socket:
        sock = self._data_socks.get(rank)
        if sock is None:
            host, port = self.dataplane["endpoints"][str(rank)]
            sock = socket.create_connection((host, port), timeout=self.timeout_s)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._data_socks[rank] = sock
        return sock

    def slice_plane(self, blocks: list[dict], var: str, level: int):
        dtype, shape = self.variables[var]
        mine = [b for b in blocks if b["var"] == var]
        if not mine:
            self.protocol_errors += 1
            raise ProtocolError(f"variable {var!r} not announced")
        return slice_from_blocks(mine, self._fetch, shape, NP_DTYPES[dtype], level)

    def close(self):
        for sock in self._data_socks.values():
            sock.close()
        self.control.close()


def _strip_json(payload: bytes) -> dict:
    return json.loads(payload)
