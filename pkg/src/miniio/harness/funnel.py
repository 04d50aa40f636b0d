"""Serial-funnel mode: every rank ships its blocks to rank 0, which alone
writes one canonical flat file; all other ranks wait for the write."""
from __future__ import annotations

import threading

import numpy as np

from .. import net
from ..cff import CffWriter
from ..codecs import StoredPayload, decode, encode
from ..core import EngineParams, Selection, VariableDef, validate_selection
from ..errors import IncompleteStep, OpenError, SelectionError, StepOrderError
from ..container.writer import defs_digest, stats_of
from ..throttle import bucket_for_dir


class _FunnelService:
    """Rank 0 side: scatter incoming blocks into step buffers, write the
    step section once every rank finished, then release the barrier."""

    def __init__(self, listener, out_path: str, defs: list[VariableDef],
                 world_size: int, steps_total: int, bucket, latency_us: float):
        self.defs = defs
        self.world = world_size
        self.writer = CffWriter(out_path, defs, steps_total, bucket)
        self.latency_us = latency_us
        self.lock = threading.Condition()
        self.members: dict[int, net.Channel] = {}
        self.done_members: set[int] = set()
        self.buffers: dict[str, np.ndarray] = {}
        self.filled = 0
        self.expected = world_size * len(defs)
        self.step = 0
        self.closed = 0
        self.failure: str | None = None
        self.listener = listener
        self._reset_buffers()
        threading.Thread(target=self._accept, daemon=True).start()

    def _reset_buffers(self):
        self.buffers = {v.name: np.zeros(v.global_shape, dtype=v.dtype.np_dtype)
                        for v in self.defs}
        self.filled = 0

    def _accept(self):
        self.listener.settimeout(60.0)
        try:
            for _ in range(self.world):
                sock, _ = self.listener.accept()
                chan = net.Channel(sock, self.latency_us)
                _, payload = chan.recv_expect(net.JOIN)
                obj, _ = net.split_obj(payload)
                rank = int(obj["rank"])
                with self.lock:
                    self.members[rank] = chan
                threading.Thread(target=self._member_loop, args=(rank, chan),
                                 daemon=True).start()
        finally:
            self.listener.close()

    def _member_loop(self, rank: int, chan: net.Channel):
        try:
            while True:
                msg_type, payload = chan.recv()
                if msg_type == net.PUT_BLOCK:
                    meta, body = net.split_obj(payload)
                    self._scatter(meta, body)
                    chan.send(net.BLOCK_ACK)
                elif msg_type == net.END_STEP:
                    obj, _ = net.split_obj(payload)
                    self._end_step(rank, int(obj["step"]))
                elif msg_type == net.FIN:
                    with self.lock:
                        self.closed += 1
                        if self.closed == self.world:
                            self.writer.close()
                            # rank 0 last; its exit would cut remaining acks off
                            for r in sorted(self.members, key=lambda r: (r == 0, r)):
                                self.members[r].send_obj(net.FIN, {})
                    return
        except EOFError:
            with self.lock:
                self.failure = f"rank {rank} disconnected"
                self.lock.notify_all()

    def _scatter(self, meta: dict, body: bytes):
        payload = StoredPayload.from_header(meta["hdr"], body)
        raw = decode(payload)
        name = meta["var"]
        vdef = next(v for v in self.defs if v.name == name)
        arr = np.frombuffer(raw, dtype=vdef.dtype.np_dtype).reshape(meta["count"])
        dst = tuple(slice(s, s + c) for s, c in zip(meta["start"], meta["count"]))
        with self.lock:
            self.buffers[name][dst] = arr
            self.filled += 1

    def _end_step(self, rank: int, step: int):
        write_now = False
        with self.lock:
            self.done_members.add(rank)
            if len(self.done_members) == self.world:
                if self.filled != self.expected:
                    self.failure = (f"step {step}: {self.filled} of "
                                    f"{self.expected} blocks arrived")
                write_now = True
        if not write_now:
            return
        if self.failure is None:
            # rank 0 alone writes; everyone else is parked at the barrier
            for vi, vdef in enumerate(self.defs):
                self.writer.write_var(step, vi, self.buffers[vdef.name].tobytes())
            self.writer.flush()
        with self.lock:
            reply = (net.ABORT, {"error": self.failure}) if self.failure \
                else (net.STEP_OK, {"step": step})
            for chan in self.members.values():
                chan.send_obj(*reply)
            self.done_members.clear()
            self._reset_buffers()
            self.step += 1


class FunnelEngine:
    def __init__(self, out_path: str, params: EngineParams,
                 defs: list[VariableDef], topology: dict, exchange):
        self.params = params
        self.defs = list(defs)
        self._by_name = {v.name: v for v in self.defs}
        self.rank = int(topology["rank"])
        self.world = int(topology["world_size"])
        steps_total = int(topology["steps_total"])
        self.current_step = 0
        latency = params.comm_latency_us or 0.0

        local: dict = {"defs": defs_digest(self.defs)}
        self.service = None
        listener = None
        if self.rank == 0:
            listener = net.listener()
            local["funnel"] = list(listener.getsockname())
        peers = exchange(local)
        if len({p["defs"] for p in peers.values()}) != 1:
            raise OpenError("inconsistent variable definitions across ranks")
        if self.rank == 0:
            bucket = bucket_for_dir(params.pfs_dir, params.pfs_bw_mbps)
            self.service = _FunnelService(listener, out_path, self.defs,
                                          self.world, steps_total, bucket, latency)
        ep = peers[0]["funnel"]
        self.chan = net.connect(ep[0], ep[1], latency)
        self.chan.send_obj(net.JOIN, {"rank": self.rank})

    def put(self, var: str, step: int, sel: Selection, data: bytes) -> None:
        if step != self.current_step:
            raise StepOrderError(f"put for step {step}, session at {self.current_step}")
        vdef = self._by_name.get(var)
        if vdef is None:
            raise SelectionError(f"unknown variable {var!r}")
        validate_selection(sel, vdef)
        if len(data) != sel.nelems * vdef.dtype.elem_size:
            raise SelectionError(f"bad byte count for {var!r}")
        stats_of(data, vdef)  # stats kept for parity with indexed modes
        payload = encode(data, vdef.dtype.elem_size, self.params.codec)
        meta = {"var": var, "step": step, "rank": self.rank,
                "start": list(sel.start), "count": list(sel.count),
                "hdr": payload.header_obj()}
        self.chan.send_obj(net.PUT_BLOCK, meta, payload.body)
        self.chan.recv_expect(net.BLOCK_ACK)

    def end_step(self) -> None:
        self.chan.send_obj(net.END_STEP, {"rank": self.rank, "step": self.current_step})
        msg_type, payload = self.chan.recv_expect(net.STEP_OK, net.ABORT)
        if msg_type == net.ABORT:
            obj, _ = net.split_obj(payload)
            raise IncompleteStep(obj.get("error") or "funnel step aborted")
        self.current_step += 1

    def close(self) -> dict:
        self.chan.send_obj(net.FIN, {"rank": self.rank})
        self.chan.recv_expect(net.FIN)
        self.chan.close()
        return {"rank": self.rank}
