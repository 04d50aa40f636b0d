"""Staging writer ranks and the rank-0 control plane.

Writer ranks buffer encoded step blocks in memory (or in shared-memory
segments) and serve them to readers; rank 0 hosts the public control
endpoint, merges per-rank fragments, applies the queue-limit admission
policy, announces steps, and tracks releases from every reader.
"""
from __future__ import annotations

import json
import os
import socket
import threading
import time
import uuid

from .. import net
from ..codecs import StoredPayload, encode
from ..core import (
    BlockRecord, EngineParams, Selection, StepIndex, VariableDef,
    crc32c, index_merge, index_serialize, validate_selection,
    _block_from_obj, _block_to_obj,
)
from ..errors import OpenError, ProtocolError, SelectionError, StallError, StepOrderError
from ..container.writer import defs_digest, stats_of
from .params import StagingParams, resolve_endpoint, shm_segment_pattern

_POLL_S = 0.05


def _defs_obj(defs: list[VariableDef]) -> list[dict]:
    return [{"name": v.name, "dtype": v.dtype.tag, "shape": list(v.global_shape),
             "step_varying": v.step_varying} for v in defs]


class _StageControl:
    """Rank-0 control plane: reader handshakes, admission, announce, release."""

    def __init__(self, public_listener, internal_listener, world_size: int,
                 staging: StagingParams, defs: list[VariableDef],
                 dataplane_desc: dict, session: str, latency_us: float):
        self.world = world_size
        self.staging = staging
        self.defs = defs
        self.dataplane_desc = dataplane_desc
        self.session = session
        self.latency_us = latency_us

        self.cv = threading.Condition()
        self.readers: dict[int, net.Channel] = {}
        self.readers_seen = 0
        self._next_reader = 0
        self.frags: dict[int, list[StepIndex]] = {}
        self.waiting: dict[int, set[int]] = {}   # announced step -> readers yet to release
        self.pending: tuple[int, StepIndex] | None = None
        self.stall_started: float | None = None
        self.skipped: list[int] = []
        self.announced = 0
        self.rank_chans: dict[int, net.Channel] = {}
        self.fins = 0
        self.closing = False
        self.done = threading.Event()

        self.public_listener = public_listener
        self.internal_listener = internal_listener
        threading.Thread(target=self._accept_ranks, daemon=True).start()
        threading.Thread(target=self._accept_readers, daemon=True).start()
        threading.Thread(target=self._admission_loop, daemon=True).start()

    # -- writer ranks ---------------------------------------------------------

    def _accept_ranks(self):
        self.internal_listener.settimeout(60.0)
        try:
            for _ in range(self.world):
                sock, _ = self.internal_listener.accept()
                chan = net.Channel(sock, self.latency_us)
                _, payload = chan.recv_expect(net.JOIN)
                obj, _ = net.split_obj(payload)
                rank = int(obj["rank"])
                with self.cv:
                    self.rank_chans[rank] = chan
                threading.Thread(target=self._rank_loop, args=(rank, chan),
                                 daemon=True).start()
        finally:
            self.internal_listener.close()

    def _rank_loop(self, rank: int, chan: net.Channel):
        try:
            while True:
                msg_type, payload = chan.recv()
                if msg_type == net.FRAGMENT:
                    obj, _ = net.split_obj(payload)
                    step = int(obj["step"])
                    blocks = tuple(_block_from_obj(b, 0) for b in obj["blocks"])
                    self._on_fragment(step, StepIndex(step, blocks))
                elif msg_type == net.FIN:
                    with self.cv:
                        self.fins += 1
                        if self.fins == self.world:
                            self.closing = True
                        self.cv.notify_all()
                    if self.closing:
                        self._close_out()
                    return
        except EOFError:
            with self.cv:
                self.closing = True
                self.cv.notify_all()

    def _on_fragment(self, step: int, frag: StepIndex):
        with self.cv:
            self.frags.setdefault(step, []).append(frag)
            if len(self.frags[step]) < self.world:
                return
            merged = index_merge(self.frags.pop(step), self.world)
            limit = self.staging.queue_limit
            if self.readers_seen < self.staging.rendezvous_readers:
                # rendezvous: hold the first announcement for the readers
                self.pending = (step, merged)
                self.cv.notify_all()
            elif limit > 0 and len(self.waiting) >= limit:
                if self.staging.queue_full_policy == "discard":
                    self.skipped.append(step)
                    self._broadcast_ranks(net.DISCARD, {"step": step})
                else:
                    self.pending = (step, merged)
                    self.stall_started = time.monotonic() if not self.readers else None
                    self.cv.notify_all()
            else:
                self._admit(step, merged)

    def _admit(self, step: int, merged: StepIndex):
        # called with self.cv held
        audience = dict(self.readers)
        self._broadcast_ranks(net.ADMIT, {"step": step})
        self.announced += 1
        line = index_serialize(merged).encode()
        for rid, chan in audience.items():
            try:
                chan.send(net.STEP_ANNOUNCE, line)
            except OSError:
                self._reader_gone(rid)
        live = {rid for rid in audience if rid in self.readers}
        if live:
            self.waiting[step] = live
        else:
            # no reader received the step: nothing to wait for
            self._broadcast_ranks(net.RELEASED, {"step": step})

    def _broadcast_ranks(self, msg_type: int, obj: dict):
        for chan in self.rank_chans.values():
            chan.send_obj(msg_type, obj)

    def _admission_loop(self):
        while not self.done.is_set():
            with self.cv:
                self.cv.wait(_POLL_S)
                if self.pending is None:
                    continue
                step, merged = self.pending
                if self.readers_seen < self.staging.rendezvous_readers:
                    continue  # still waiting for the rendezvous readers
                limit = self.staging.queue_limit
                if limit == 0 or len(self.waiting) < limit:
                    self.pending = None
                    self.stall_started = None
                    self._admit(step, merged)
                elif not self.readers:
                    if self.stall_started is None:
                        self.stall_started = time.monotonic()
                    elif time.monotonic() - self.stall_started > self.staging.step_timeout_ms / 1e3:
                        self.pending = None
                        self._broadcast_ranks(
                            net.STALLED,
                            {"step": step, "error": "queue full and all readers gone"})
                else:
                    self.stall_started = None

    # -- readers --------------------------------------------------------------

    def _accept_readers(self):
        while not self.done.is_set():
            try:
                self.public_listener.settimeout(0.25)
                sock, _ = self.public_listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._reader_handshake, args=(sock,),
                             daemon=True).start()

    def _reader_handshake(self, sock):
        chan = net.Channel(sock, self.latency_us)
        try:
            _, payload = chan.recv_expect(net.HELLO_R)
            obj = json.loads(payload)
        except Exception:
            chan.close()
            return
        if int(obj.get("version", -1)) != net.PROTOCOL_VERSION:
            chan.send_json(net.ERR, {"code": "version",
                                     "message": f"protocol version {net.PROTOCOL_VERSION} required"})
            chan.close()
            return
        if (self.dataplane_desc["kind"] == "shm"
                and obj.get("hostname") != socket.gethostname()):
            chan.send_json(net.ERR, {"code": "dataplane",
                                     "message": "shm dataplane requires a same-host reader"})
            chan.close()
            return
        hello = {
            "version": net.PROTOCOL_VERSION,
            "session": self.session,
            "world_size": self.world,
            "variables": _defs_obj(self.defs),
            "dataplane": self.dataplane_desc,
        }
        chan.send_json(net.HELLO_W, hello)
        with self.cv:
            rid = self._next_reader
            self._next_reader += 1
            self.readers[rid] = chan
            self.readers_seen += 1
            self.cv.notify_all()
        self._reader_loop(rid, chan)

    def _reader_loop(self, rid: int, chan: net.Channel):
        try:
            while True:
                msg_type, payload = chan.recv()
                if msg_type == net.STEP_RELEASE:
                    self._on_release(rid, int(json.loads(payload)["step"]))
                elif msg_type == net.CLOSE:
                    break
                else:
                    chan.send_json(net.ERR, {"code": "protocol",
                                             "message": f"unexpected message {msg_type}"})
        except (EOFError, OSError):
            pass
        with self.cv:
            self._reader_gone(rid)
            self.cv.notify_all()

    def _on_release(self, rid: int, step: int):
        with self.cv:
            audience = self.waiting.get(step)
            if audience is None:
                return
            audience.discard(rid)
            if not audience:
                del self.waiting[step]
                self._broadcast_ranks(net.RELEASED, {"step": step})
                self.cv.notify_all()

    def _reader_gone(self, rid: int):
        # held steps stay held: a vanished reader's releases never arrive,
        # which is what turns a full queue into a stall
        chan = self.readers.pop(rid, None)
        if chan is not None:
            try:
                chan.close()
            except OSError:
                pass

    # -- shutdown -------------------------------------------------------------

    def _close_out(self):
        deadline = time.monotonic() + self.staging.step_timeout_ms / 1e3
        with self.cv:
            while self.waiting and self.readers and time.monotonic() < deadline:
                self.cv.wait(_POLL_S)
            for chan in self.readers.values():
                try:
                    chan.send(net.CLOSE)
                except OSError:
                    pass
            stats = {"skipped_steps": self.skipped, "announced": self.announced,
                     "unreleased_at_close": len(self.waiting)}
            # rank 0 hosts this control plane: ack it last so its process
            # exit cannot cut off acks queued for other ranks
            for rank in sorted(self.rank_chans, key=lambda r: (r == 0, r)):
                self.rank_chans[rank].send_obj(net.FIN, stats)
        self.done.set()
        try:
            self.public_listener.close()
        except OSError:
            pass


class StageWriter:
    """Per-rank staging writer; single caller, internal workers."""

    def __init__(self, params: EngineParams, staging: StagingParams,
                 defs: list[VariableDef], topology: dict, exchange):
        self.params = params
        self.staging = staging
        self.defs = list(defs)
        self._by_name = {v.name: v for v in self.defs}
        self.rank = int(topology["rank"])
        self.world = int(topology["world_size"])
        self.current_step = 0
        latency = params.comm_latency_us or 0.0

        self._lock = threading.Condition()
        self._live: dict[tuple[int, str], tuple[BlockRecord, StoredPayload]] = {}
        self._step_blocks: list[BlockRecord] = []
        self._step_nbytes = 0
        self._verdicts: dict[int, tuple[int, str]] = {}
        self.unreleased = 0
        self.max_unreleased = 0
        self.skipped_steps: list[int] = []
        self._fin = threading.Event()
        self._fin_stats: dict = {}

        local: dict = {"defs": defs_digest(self.defs)}
        self.data_listener = None
        if staging.dataplane == "tcp":
            self.data_listener = net.listener()
            local["data"] = list(self.data_listener.getsockname())
        control_listener = internal_listener = None
        if self.rank == 0:
            ep = resolve_endpoint(staging.control_endpoint)
            try:
                control_listener = net.listener(*ep) if ep else net.listener()
            except OSError as exc:
                raise OpenError(f"cannot bind control endpoint: {exc}") from exc
            internal_listener = net.listener()
            local["internal"] = list(internal_listener.getsockname())
            local["control"] = list(control_listener.getsockname())
            local["session"] = uuid.uuid4().hex[:12]

        peers = exchange(local)
        if len({info["defs"] for info in peers.values()}) != 1:
            raise OpenError("inconsistent variable definitions across ranks")
        self.session = peers[0]["session"]
        self.control_endpoint = tuple(peers[0]["control"])
        self.segment_pattern = shm_segment_pattern(self.session)

        self.control = None
        if self.rank == 0:
            if staging.dataplane == "tcp":
                desc = {"kind": "tcp",
                        "endpoints": {str(r): list(peers[r]["data"]) for r in peers}}
            else:
                desc = {"kind": "shm", "pattern": self.segment_pattern}
            self.control = _StageControl(control_listener, internal_listener,
                                         self.world, staging, self.defs, desc,
                                         self.session, latency)

        internal_ep = peers[0]["internal"]
        self.chan = net.connect(internal_ep[0], internal_ep[1], latency)
        self.chan.send_obj(net.JOIN, {"rank": self.rank})
        threading.Thread(target=self._recv_loop, daemon=True).start()
        if self.data_listener is not None:
            threading.Thread(target=self._serve_data, daemon=True).start()

    # -- internal channel -----------------------------------------------------

    def _recv_loop(self):
        try:
            while True:
                msg_type, payload = self.chan.recv()
                obj, _ = net.split_obj(payload)
                if msg_type in (net.ADMIT, net.DISCARD, net.STALLED):
                    with self._lock:
                        self._verdicts[int(obj.get("step", -1))] = (msg_type,
                                                                    obj.get("error", ""))
                        self._lock.notify_all()
                elif msg_type == net.RELEASED:
                    self._free_step(int(obj["step"]))
                elif msg_type == net.FIN:
                    self._fin_stats = obj
                    self._fin.set()
                    return
        except EOFError:
            self._fin.set()

    def _free_step(self, step: int):
        with self._lock:
            for key in [k for k in self._live if k[0] == step]:
                del self._live[key]
            self.unreleased -= 1
            self._lock.notify_all()
        if self.staging.dataplane == "shm":
            try:
                os.unlink(self.segment_pattern.format(rank=self.rank, step=step))
            except OSError:
                pass

    # -- data plane (tcp) -------------------------------------------------------

    def _serve_data(self):
        while True:
            try:
                self.data_listener.settimeout(0.25)
                sock, _ = self.data_listener.accept()
            except socket.timeout:
                if self._fin.is_set():
                    return
                continue
            except OSError:
                return
            threading.Thread(target=self._serve_conn,
                             args=(net.Channel(sock, self.params.comm_latency_us or 0.0),),
                             daemon=True).start()

    def _serve_conn(self, chan: net.Channel):
        try:
            while True:
                msg_type, payload = chan.recv()
                if msg_type != net.GET_REQ:
                    chan.send_json(net.ERR, {"code": "protocol",
                                             "message": f"unexpected message {msg_type}"})
                    continue
                obj = json.loads(payload)
                key = (int(obj["step"]), obj["var"])
                with self._lock:
                    entry = self._live.get(key)
                if entry is None:
                    chan.send_json(net.ERR, {
                        "code": "gone",
                        "message": f"block {obj['var']!r} step {obj['step']} "
                                   f"not buffered (released or never announced)"})
                    continue
                _, payload_obj = entry
                header = payload_obj.header_json()
                frame = len(header).to_bytes(4, "little") + header + payload_obj.body
                chan.send(net.DATA, frame)
        except (EOFError, OSError):
            pass
        finally:
            chan.close()

    # -- producer API -----------------------------------------------------------

    def put(self, var: str, step: int, sel: Selection, data: bytes) -> None:
        if step != self.current_step:
            raise StepOrderError(
                f"put for step {step} while session is at step {self.current_step}")
        vdef = self._by_name.get(var)
        if vdef is None:
            raise SelectionError(f"unknown variable {var!r}")
        validate_selection(sel, vdef)
        expected = sel.nelems * vdef.dtype.elem_size
        if len(data) != expected:
            raise SelectionError(f"{var!r} selection needs {expected} bytes, got {len(data)}")
        lo, hi = stats_of(data, vdef)
        payload = encode(data, vdef.dtype.elem_size, self.params.codec)
        record = BlockRecord(
            var=var, step=step, writer_rank=self.rank,
            selection=sel, subfile_id=self.rank, offset=self._step_nbytes,
            stored_nbytes=len(payload.body), raw_nbytes=payload.raw_nbytes,
            codec=payload.spec, checksum_raw=crc32c(data),
            stat_min=lo, stat_max=hi)
        with self._lock:
            self._live[(step, var)] = (record, payload)
        self._step_blocks.append(record)
        self._step_nbytes += len(payload.body)

    def end_step(self) -> None:
        step = self.current_step
        if self.staging.dataplane == "shm":
            self._write_segment(step)
        frag = {"step": step, "blocks": [_block_to_obj(r) for r in self._step_blocks]}
        self.chan.send_obj(net.FRAGMENT, frag)
        with self._lock:
            while step not in self._verdicts:
                self._lock.wait(_POLL_S)
            verdict, error = self._verdicts.pop(step)
            if verdict == net.ADMIT:
                self.unreleased += 1
                self.max_unreleased = max(self.max_unreleased, self.unreleased)
        if verdict == net.STALLED:
            raise StallError(error or "staging queue stalled")
        if verdict == net.DISCARD:
            self.skipped_steps.append(step)
            self._drop_step(step)
        self._step_blocks = []
        self._step_nbytes = 0
        self.current_step += 1

    def _write_segment(self, step: int):
        path = self.segment_pattern.format(rank=self.rank, step=step)
        with open(path, "wb") as f:
            for record in self._step_blocks:
                with self._lock:
                    _, payload = self._live[(step, record.var)]
                f.write(payload.body)

    def _drop_step(self, step: int):
        with self._lock:
            for key in [k for k in self._live if k[0] == step]:
                del self._live[key]
        if self.staging.dataplane == "shm":
            try:
                os.unlink(self.segment_pattern.format(rank=self.rank, step=step))
            except OSError:
                pass

    def close(self) -> dict:
        self.chan.send_obj(net.FIN, {"rank": self.rank})
        self._fin.wait(self.staging.step_timeout_ms / 1e3 * 2)
        if self.data_listener is not None:
            try:
                self.data_listener.close()
            except OSError:
                pass
        # drop anything still buffered (e.g. forced close)
        for step in {k[0] for k in list(self._live)}:
            self._drop_step(step)
        self.chan.close()
        summary = {"rank": self.rank, "skipped_steps": self.skipped_steps,
                   "max_unreleased": self.max_unreleased}
        summary.update(self._fin_stats)
        return summary


def stage_writer_open(params: EngineParams, defs: list[VariableDef],
                      topology: dict, exchange,
                      staging: StagingParams | None = None) -> StageWriter:
    staging = staging or StagingParams.from_engine(params)
    return StageWriter(params, staging, defs, topology, exchange)
