"""Staging consumer: stepping-mode reads from a live writer endpoint."""
from __future__ import annotations

import json
import socket

from .. import net
from ..codecs import StoredPayload, decode
from ..core import (BlockRecord, Selection, StepIndex, VariableDef,
                    assemble_selection, crc32c, dtype_for, index_parse)
from ..errors import CorruptBlock, OpenError, ProtocolError, StageTimeout
from .params import resolve_endpoint


class StageReader:
    """Single-caller stepping reader: begin_step / get / end_step / close."""

    def __init__(self, endpoint: str | None = None, timeout_ms: int = 30_000,
                 latency_us: float = 0.0):
        ep = resolve_endpoint(endpoint)
        if ep is None:
            raise OpenError("no staging endpoint configured")
        self.timeout_s = timeout_ms / 1e3
        self.latency_us = latency_us
        try:
            self.control = net.connect(ep[0], ep[1], latency_us,
                                       timeout_s=self.timeout_s)
        except OSError as exc:
            raise OpenError(f"cannot reach staging endpoint {ep}: {exc}") from exc
        self.control.sock.settimeout(self.timeout_s)
        self.control.send_json(net.HELLO_R, {"version": net.PROTOCOL_VERSION,
                                             "hostname": socket.gethostname()})
        msg_type, payload = self._recv_control()
        obj = json.loads(payload)
        if msg_type == net.ERR:
            raise ProtocolError(f"writer rejected handshake: {obj.get('message')}")
        if msg_type != net.HELLO_W:
            raise ProtocolError(f"expected HELLO_W, got {msg_type}")
        if int(obj.get("version", -1)) != net.PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {obj.get('version')}")
        self.session = obj["session"]
        self.world_size = int(obj["world_size"])
        self.defs = [VariableDef(v["name"], dtype_for(v["dtype"]), tuple(v["shape"]),
                                 bool(v.get("step_varying", True)))
                     for v in obj["variables"]]
        self._by_name = {v.name: v for v in self.defs}
        self.dataplane = obj["dataplane"]
        self._data_chans: dict[int, net.Channel] = {}
        self.current: StepIndex | None = None
        self.protocol_errors = 0

    def _recv_control(self):
        try:
            return self.control.recv()
        except socket.timeout:
            raise StageTimeout(f"no control message within {self.timeout_s}s") from None

    # -- stepping ---------------------------------------------------------------

    def begin_step(self) -> StepIndex | None:
        """Next announced step, or None at end-of-stream."""
        if self.current is not None:
            raise ProtocolError("previous step not ended")
        msg_type, payload = self._recv_control()
        if msg_type == net.CLOSE:
            return None
        if msg_type == net.ERR:
            self.protocol_errors += 1
            raise ProtocolError(f"writer error: {json.loads(payload).get('message')}")
        if msg_type != net.STEP_ANNOUNCE:
            self.protocol_errors += 1
            raise ProtocolError(f"expected STEP_ANNOUNCE, got {msg_type}")
        self.current = index_parse(payload.decode())
        return self.current

    def get(self, var: str, sel: Selection) -> bytes:
        if self.current is None:
            raise ProtocolError("get outside an active step")
        vdef = self._by_name.get(var)
        blocks = self.current.blocks_for(var)
        if vdef is None or not blocks:
            raise ProtocolError(f"variable {var!r} not announced in step")
        return assemble_selection(vdef, sel, blocks, self._fetch)

    def get_full(self, var: str) -> bytes:
        vdef = self._by_name.get(var)
        if vdef is None:
            raise ProtocolError(f"variable {var!r} not announced")
        return self.get(var, Selection((0,) * len(vdef.global_shape),
                                       vdef.global_shape))

    def end_step(self) -> None:
        if self.current is None:
            raise ProtocolError("no active step to end")
        self.control.send_json(net.STEP_RELEASE, {"step": self.current.step})
        self.current = None

    # -- block fetch --------------------------------------------------------------

    def _fetch(self, block: BlockRecord) -> bytes:
        if self.dataplane["kind"] == "tcp":
            payload = self._fetch_tcp(block)
        else:
            payload = self._fetch_shm(block)
        raw = decode(payload)
        if crc32c(raw) != block.checksum_raw:
            raise CorruptBlock(
                f"checksum mismatch for {block.var!r} step {block.step} "
                f"rank {block.writer_rank}",
                subfile=block.subfile_id, offset=block.offset)
        return raw

    def _data_chan(self, rank: int) -> net.Channel:
        chan = self._data_chans.get(rank)
        if chan is None:
            host, port = self.dataplane["endpoints"][str(rank)]
            chan = net.connect(host, port, self.latency_us, timeout_s=self.timeout_s)
            chan.sock.settimeout(self.timeout_s)
            self._data_chans[rank] = chan
        return chan

    def _fetch_tcp(self, block: BlockRecord) -> StoredPayload:
        chan = self._data_chan(block.writer_rank)
        chan.send_json(net.GET_REQ, {"step": block.step, "var": block.var,
                                     "rank": block.writer_rank})
        try:
            msg_type, payload = chan.recv()
        except socket.timeout:
            raise StageTimeout(f"no DATA for {block.var!r} within {self.timeout_s}s") from None
        if msg_type == net.ERR:
            self.protocol_errors += 1
            raise ProtocolError(f"writer rank {block.writer_rank}: "
                                f"{json.loads(payload).get('message')}")
        if msg_type != net.DATA:
            self.protocol_errors += 1
            raise ProtocolError(f"expected DATA, got {msg_type}")
        n = int.from_bytes(payload[:4], "little")
        header = json.loads(payload[4:4 + n])
        return StoredPayload.from_header(header, payload[4 + n:])

    def _fetch_shm(self, block: BlockRecord) -> StoredPayload:
        vdef = self._by_name[block.var]
        path = self.dataplane["pattern"].format(rank=block.writer_rank,
                                                step=block.step)
        try:
            with open(path, "rb") as f:
                f.seek(block.offset)
                body = f.read(block.stored_nbytes)
        except FileNotFoundError:
            self.protocol_errors += 1
            raise ProtocolError(f"segment {path} gone (released?)") from None
        if len(body) != block.stored_nbytes:
            raise ProtocolError(f"segment {path} shorter than the announced block")
        return StoredPayload(block.raw_nbytes, block.codec.codec, block.codec.level,
                             block.codec.shuffle, vdef.dtype.elem_size, body)

    def close(self) -> None:
        for chan in self._data_chans.values():
            chan.close()
        self._data_chans.clear()
        self.control.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
