"""Container writer: rank sessions, aggregator fan-in services, index commit.

Per step, every rank encodes its blocks locally and ships them to its
aggregator over the message layer.  Aggregators append bodies to their
sub-file in a deterministic (variable, rank) schedule while blocks are still
arriving, then send the step's block records to rank 0, which merges them and
appends one complete index line: the sole commit point.  end_step returns
after that commit barrier; with a burst buffer it never waits for the PFS
drain.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
import time

import numpy as np

from .. import net
from ..codecs import StoredPayload, encode
from ..core import (
    BlockRecord, EngineParams, Selection, StepIndex, VariableDef,
    crc32c, index_merge, index_serialize, validate_selection,
    _block_from_obj, _block_to_obj,
)
from ..errors import IncompleteStep, OpenError, SelectionError, StepOrderError
from ..throttle import bucket_for_dir, stream_id, write_throttled
from .drain import DrainWorker
from .layout import ContainerLayout, aggregator_map, bb_data_dir, write_info

STEP_TIMEOUT_S = 120.0
STAGE_NBYTES = 1 << 20


def defs_digest(defs: list[VariableDef]) -> str:
    desc = [(v.name, v.dtype.tag, list(v.global_shape), v.step_varying) for v in defs]
    return hashlib.sha256(json.dumps(desc).encode()).hexdigest()


def stats_of(data: bytes, vdef: VariableDef) -> tuple[float, float]:
    arr = np.frombuffer(data, dtype=vdef.dtype.np_dtype)
    if vdef.dtype.tag not in ("f32", "f64"):
        arr = arr.astype(np.float64)
    return float(arr.min()), float(arr.max())


class _StepState:
    __slots__ = ("blocks", "done_members", "appended", "segment", "records")

    def __init__(self):
        self.blocks = {}          # (var, rank) -> (meta, body)
        self.done_members = set()
        self.appended = False
        self.segment = (0, 0)
        self.records = []


class _AggregatorService:
    """Runs inside an aggregator rank: accepts group connections, appends
    block bodies to the sub-file, finalizes steps against the index service."""

    def __init__(self, listener, subfile_id: int, group: list[int],
                 defs: list[VariableDef], params: EngineParams,
                 layout: ContainerLayout, bucket, index_ep, latency_us: float):
        self.listener = listener
        self.subfile_id = subfile_id
        self.group = group
        self.defs = defs
        self.params = params
        self.layout = layout
        self.bucket = bucket
        self.latency_us = latency_us
        self.lock = threading.Condition()
        self.steps: dict[int, _StepState] = {}
        self.members: dict[int, net.Channel] = {}
        self.closed_members: set[int] = set()
        self.failure: str | None = None
        self.offset = 0
        self.bytes_written = 0

        use_bb = params.bb_dir is not None
        data_path = layout.subfile_path(subfile_id)
        os.makedirs(os.path.dirname(data_path), exist_ok=True)
        self.data_file = open(data_path, "w+b")
        self.direct_bucket = None if use_bb else bucket
        self.stream = stream_id("data", subfile_id)
        self._stage = bytearray()
        self.drain = None
        if params.drain:
            pfs_path = layout.pfs_subfile_path(subfile_id)
            with open(pfs_path, "wb"):
                pass
            self.drain = DrainWorker(data_path, pfs_path, bucket)

        self.index_chan = net.connect(index_ep[0], index_ep[1], latency_us)
        self.index_chan.send_obj(net.JOIN, {"subfile": subfile_id})

        self._threads = [threading.Thread(target=self._accept_loop, daemon=True),
                         threading.Thread(target=self._append_loop, daemon=True),
                         threading.Thread(target=self._finalize_loop, daemon=True)]
        for t in self._threads:
            t.start()

    # -- connection handling ------------------------------------------------

    def _accept_loop(self):
        self.listener.settimeout(STEP_TIMEOUT_S)
        try:
            for _ in self.group:
                sock, _ = self.listener.accept()
                chan = net.Channel(sock, self.latency_us)
                _, payload = chan.recv_expect(net.JOIN)
                obj, _ = net.split_obj(payload)
                rank = int(obj["rank"])
                with self.lock:
                    self.members[rank] = chan
                    self.lock.notify_all()
                threading.Thread(target=self._member_loop, args=(rank, chan),
                                 daemon=True).start()
        except Exception as exc:
            self._fail(f"aggregator accept failed: {exc}")
        finally:
            self.listener.close()

    def _member_loop(self, rank: int, chan: net.Channel):
        try:
            while True:
                msg_type, payload = chan.recv()
                if msg_type == net.PUT_BLOCK:
                    meta, body = net.split_obj(payload)
                    key = (meta["var"], int(meta["rank"]))
                    with self.lock:
                        self.steps.setdefault(int(meta["step"]), _StepState())
                        self.steps[int(meta["step"])].blocks[key] = (meta, body)
                        self.lock.notify_all()
                    chan.send(net.BLOCK_ACK)
                elif msg_type == net.END_STEP:
                    obj, _ = net.split_obj(payload)
                    with self.lock:
                        self.steps.setdefault(int(obj["step"]), _StepState())
                        self.steps[int(obj["step"])].done_members.add(rank)
                        self.lock.notify_all()
                elif msg_type == net.FIN:
                    with self.lock:
                        self.closed_members.add(rank)
                        self.lock.notify_all()
                    return
                else:
                    raise OpenError(f"unexpected message {msg_type} from rank {rank}")
        except EOFError:
            with self.lock:
                self.closed_members.add(rank)
                if rank not in self.members:
                    pass
                self.lock.notify_all()
        except Exception as exc:
            self._fail(f"member {rank} handler: {exc}")

    def _fail(self, msg: str):
        with self.lock:
            if self.failure is None:
                self.failure = msg
            self.lock.notify_all()

    # -- appending ----------------------------------------------------------

    def _append_loop(self):
        """Append bodies in the fixed (variable, rank) schedule, streaming:
        each block is written as soon as it and its predecessors arrived."""
        step = 0
        try:
            while True:
                with self.lock:
                    while not (self.failure or self._step_started(step)
                               or len(self.closed_members) == len(self.group)):
                        self.lock.wait(0.2)
                    if self.failure:
                        return
                    if not self._step_started(step):
                        return  # all members closed, no more steps
                state = None
                start_offset = self.offset
                for vdef in self.defs:
                    for rank in self.group:
                        key = (vdef.name, rank)
                        deadline = time.monotonic() + STEP_TIMEOUT_S
                        with self.lock:
                            state = self.steps[step]
                            while key not in state.blocks and not self.failure:
                                if time.monotonic() > deadline:
                                    self._fail(f"timeout waiting for block {key} step {step}")
                                    break
                                self.lock.wait(0.2)
                            if self.failure:
                                return
                            meta, body = state.blocks.pop(key)
                        record = self._append_block(meta, body)
                        with self.lock:
                            state.records.append(record)
                self._flush_stage()
                # data must be durable before the index line commits the step
                self.data_file.flush()
                os.fsync(self.data_file.fileno())
                with self.lock:
                    state.segment = (start_offset, self.offset)
                    state.appended = True
                    self.lock.notify_all()
                step += 1
        except Exception as exc:
            self._fail(f"append loop: {exc}")

    def _step_started(self, step: int) -> bool:
        state = self.steps.get(step)
        return bool(state and (state.blocks or state.done_members))

    def _flush_stage(self):
        if self._stage:
            write_throttled(self.data_file, self._stage, self.direct_bucket,
                            stream=self.stream)
            self._stage = bytearray()

    def _append_block(self, meta: dict, body: bytes) -> BlockRecord:
        # coalesce into ~1 MiB writes: the aggregator streams sequentially
        self._stage += body
        if len(self._stage) >= STAGE_NBYTES:
            self._flush_stage()
        record = BlockRecord(
            var=meta["var"], step=int(meta["step"]), writer_rank=int(meta["rank"]),
            selection=Selection(tuple(meta["start"]), tuple(meta["count"])),
            subfile_id=self.subfile_id, offset=self.offset,
            stored_nbytes=len(body), raw_nbytes=int(meta["raw"]),
            codec=StoredPayload.from_header(meta["hdr"], b"").spec,
            checksum_raw=int(meta["crc32c"], 16),
            stat_min=float(meta["min"]), stat_max=float(meta["max"]))
        self.offset += len(body)
        self.bytes_written += len(body)
        return record

    # -- per-step finalize against the index service -------------------------

    def _finalize_loop(self):
        step = 0
        try:
            while True:
                with self.lock:
                    while not (self.failure
                               or self._step_ready(step)
                               or (len(self.closed_members) == len(self.group)
                                   and not self._step_started(step))):
                        self.lock.wait(0.2)
                    if self.failure:
                        self._abort_members()
                        return
                    if not self._step_ready(step):
                        break  # session closing
                    state = self.steps.pop(step)
                frag = {"step": step,
                        "blocks": [_block_to_obj(r) for r in state.records]}
                self.index_chan.send_obj(net.FRAGMENT, frag)
                self.index_chan.recv_expect(net.COMMIT)
                if self.drain is not None:
                    start, end = state.segment
                    self.drain.enqueue(step, start, end - start)
                with self.lock:
                    for chan in self.members.values():
                        chan.send_obj(net.STEP_OK, {"step": step})
                step += 1
            self._shutdown()
        except Exception as exc:
            self._fail(f"finalize loop: {exc}")
            self._abort_members()

    def _step_ready(self, step: int) -> bool:
        state = self.steps.get(step)
        return bool(state and state.appended
                    and state.done_members == set(self.group))

    def _abort_members(self):
        with self.lock:
            for chan in self.members.values():
                try:
                    chan.send_obj(net.ABORT, {"error": self.failure or "aborted"})
                except OSError:
                    pass

    def _shutdown(self):
        drain_state = None
        if self.drain is not None:
            drain_state = self.drain.close(wait=True)
        self.data_file.close()
        summary = {"subfile": self.subfile_id, "bytes_written": self.bytes_written}
        if drain_state is not None:
            summary.update({
                "bytes_drained": drain_state.bytes_drained,
                "drain_seconds": drain_state.seconds,
                "bytes_pending": drain_state.bytes_pending,
                "drained_through_step": drain_state.drained_through_step,
                "drain_errors": drain_state.errors,
            })
            if not drain_state.errors:
                # burst buffer contents are scratch once drained
                try:
                    os.unlink(self.layout.subfile_path(self.subfile_id))
                    os.rmdir(os.path.dirname(self.layout.subfile_path(self.subfile_id)))
                except OSError:
                    pass
        self.index_chan.send_obj(net.FIN, summary)
        self.index_chan.recv_expect(net.FIN)
        self.index_chan.close()
        with self.lock:
            # the aggregator's own rank (lowest of the group) last: its
            # process exits once acked, cutting off still-queued acks
            for rank in sorted(self.members, key=lambda r: (r == self.group[0], r)):
                self.members[rank].send_obj(net.FIN, summary)


class _IndexService:
    """Runs inside rank 0: merges aggregator fragments and appends one
    complete index line per step (the commit point)."""

    def __init__(self, listener, num_aggs: int, world_size: int,
                 index_path: str, bucket, latency_us: float):
        self.listener = listener
        self.num_aggs = num_aggs
        self.world_size = world_size
        self.bucket = bucket
        self.latency_us = latency_us
        self.index_file = open(index_path, "wb")
        self.lock = threading.Lock()
        self.frags: dict[int, list[StepIndex]] = {}
        self.chans: list[net.Channel] = []
        self.fins = 0
        self.done = threading.Event()
        self.summaries: list[dict] = []
        self.steps_committed = 0
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _accept_loop(self):
        self.listener.settimeout(STEP_TIMEOUT_S)
        try:
            for _ in range(self.num_aggs):
                sock, _ = self.listener.accept()
                chan = net.Channel(sock, self.latency_us)
                chan.recv_expect(net.JOIN)
                self.chans.append(chan)
                threading.Thread(target=self._agg_loop, args=(chan,),
                                 daemon=True).start()
        finally:
            self.listener.close()

    def _agg_loop(self, chan: net.Channel):
        while True:
            msg_type, payload = chan.recv()
            if msg_type == net.FRAGMENT:
                obj, _ = net.split_obj(payload)
                step = int(obj["step"])
                blocks = tuple(_block_from_obj(b, 0) for b in obj["blocks"])
                with self.lock:
                    self.frags.setdefault(step, []).append(StepIndex(step, blocks))
                    ready = len(self.frags[step]) == self.num_aggs
                if ready:
                    self._commit(step)
            elif msg_type == net.FIN:
                obj, _ = net.split_obj(payload)
                with self.lock:
                    self.summaries.append(obj)
                    self.fins += 1
                    last = self.fins == self.num_aggs
                if last:
                    self.index_file.flush()
                    os.fsync(self.index_file.fileno())
                    self.index_file.close()
                    for c in self.chans:
                        c.send(net.FIN)
                    self.done.set()
                return

    def _commit(self, step: int):
        with self.lock:
            parts = self.frags.pop(step)
        merged = index_merge(parts, self.world_size)
        if not merged.complete:
            raise IncompleteStep(f"step {step} merged without all ranks")
        line = index_serialize(merged).encode() + b"\n"
        write_throttled(self.index_file, line, self.bucket,
                        stream=stream_id("index"))
        self.index_file.flush()
        self.steps_committed += 1
        for chan in self.chans:
            chan.send_obj(net.COMMIT, {"step": step})


class _SenderPipeline:
    """Deferred puts: encode and ship blocks on a worker thread so
    compression overlaps transfer waits; end_step drains the queue."""

    def __init__(self, chan: net.Channel, codec):
        self.chan = chan
        self.codec = codec
        self.lock = threading.Condition()
        self.queue: list[tuple[dict, bytes, object]] = []
        self.inflight = 0
        self.failure: Exception | None = None
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def submit(self, meta: dict, data: bytes, vdef: VariableDef):
        with self.lock:
            if self.failure:
                raise self.failure
            self.queue.append((meta, data, vdef))
            self.inflight += 1
            self.lock.notify_all()

    def _run(self):
        while True:
            with self.lock:
                while not self.queue:
                    self.lock.wait()
                meta, data, vdef = self.queue.pop(0)
            try:
                lo, hi = stats_of(data, vdef)
                payload = encode(data, vdef.dtype.elem_size, self.codec)
                meta = dict(meta, raw=payload.raw_nbytes, hdr=payload.header_obj(),
                            crc32c=f"{crc32c(data):08x}", min=lo, max=hi)
                self.chan.send_obj(net.PUT_BLOCK, meta, payload.body)
                self.chan.recv_expect(net.BLOCK_ACK)
            except Exception as exc:  # surfaced on the caller thread
                with self.lock:
                    self.failure = exc
                    self.inflight = 0
                    self.lock.notify_all()
                return
            with self.lock:
                self.inflight -= 1
                self.lock.notify_all()

    def drain(self):
        with self.lock:
            while self.inflight and not self.failure:
                self.lock.wait()
            if self.failure:
                raise self.failure


class WriterSession:
    """Single-caller per rank; put/end_step/close.  Puts are deferred: the
    data is buffered at the caller and encoded/shipped by a pipeline worker,
    and end_step synchronizes."""

    def __init__(self, dir_path: str, params: EngineParams,
                 defs: list[VariableDef], topology: dict, exchange):
        self.params = params
        self.defs = list(defs)
        self._by_name = {v.name: v for v in self.defs}
        self.rank = int(topology["rank"])
        self.world_size = int(topology["world_size"])
        rpn = int(topology.get("ranks_per_node", self.world_size))
        ratio = params.aggregation_ratio or rpn
        self.map = aggregator_map(self.world_size, rpn, ratio)
        self.current_step = 0
        latency = params.comm_latency_us or 0.0

        data_dir = bb_data_dir(params.bb_dir, dir_path) if params.bb_dir else None
        self.layout = ContainerLayout(dir_path, data_dir)
        os.makedirs(self.layout.dir, exist_ok=True)
        pfs_root = params.pfs_dir or os.path.dirname(self.layout.dir)
        bucket = bucket_for_dir(pfs_root, params.pfs_bw_mbps)

        is_agg = self.map.rank_to_agg[self.rank] == self.rank
        local: dict = {"defs": defs_digest(self.defs)}
        agg_listener = index_listener = None
        if is_agg:
            agg_listener = net.listener()
            local["agg"] = list(agg_listener.getsockname())
        if self.rank == 0:
            index_listener = net.listener()
            local["index"] = list(index_listener.getsockname())

        peers = exchange(local)
        digests = {r: info["defs"] for r, info in peers.items()}
        if len(set(digests.values())) != 1:
            raise OpenError(f"inconsistent variable definitions across ranks: {digests}")

        index_ep = peers[0]["index"]
        self.index_service = None
        if self.rank == 0:
            write_info(self.layout, params, self.defs, self.world_size, rpn,
                       ratio, data_dir=data_dir if not params.drain else None)
            self.index_service = _IndexService(
                index_listener, len(self.map.aggregators), self.world_size,
                self.layout.index_path, bucket, latency)

        self.service = None
        if is_agg:
            subfile = self.map.subfile_of_agg(self.rank)
            self.service = _AggregatorService(
                agg_listener, subfile, self.map.group_of(subfile), self.defs,
                params, self.layout, bucket, index_ep, latency)

        agg_ep = peers[self.map.rank_to_agg[self.rank]]["agg"]
        self.chan = net.connect(agg_ep[0], agg_ep[1], latency)
        self.chan.send_obj(net.JOIN, {"rank": self.rank})
        self.pipeline = _SenderPipeline(self.chan, params.codec)

    # -- data path ----------------------------------------------------------

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
            raise SelectionError(
                f"{var!r} selection needs {expected} bytes, got {len(data)}")
        meta = {
            "var": var, "step": step, "rank": self.rank,
            "start": list(sel.start), "count": list(sel.count),
        }
        self.pipeline.submit(meta, bytes(data), vdef)

    def end_step(self) -> None:
        self.pipeline.drain()
        self.chan.send_obj(net.END_STEP, {"rank": self.rank, "step": self.current_step})
        msg_type, payload = self.chan.recv_expect(net.STEP_OK, net.ABORT)
        if msg_type == net.ABORT:
            obj, _ = net.split_obj(payload)
            raise IncompleteStep(obj.get("error", "step aborted"))
        self.current_step += 1

    def close(self) -> dict:
        self.chan.send_obj(net.FIN, {"rank": self.rank})
        _, payload = self.chan.recv_expect(net.FIN)
        summary, _ = net.split_obj(payload)
        self.chan.close()
        if self.index_service is not None:
            if not self.index_service.done.wait(STEP_TIMEOUT_S):
                raise IncompleteStep("index service did not finish")
            summary = dict(summary)
            summary["steps_committed"] = self.index_service.steps_committed
            summary["aggregators"] = self.index_service.summaries
        return summary


def writer_open(dir_path: str, params: EngineParams, defs: list[VariableDef],
                topology: dict, exchange) -> WriterSession:
    """Open a container for writing.  ``exchange`` is an allgather callable:
    given this rank's endpoint dict it returns every rank's dict (and thereby
    doubles as the open barrier)."""
    return WriterSession(dir_path, params, defs, topology, exchange)
