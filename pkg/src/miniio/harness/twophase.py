"""Shared-file two-phase collective writing.

Phase 1 redistributes every rank's patch rows to the collective-buffering
owners (one per node, as coordinated MPI-I/O defaults to) over the message
layer; once every rank has finished redistributing, phase 2 has each owner
write its contiguous region of the shared canonical file at exact offsets.
The phases never overlap, and the result is bit-identical to the serial
funnel's output.
"""
from __future__ import annotations

import itertools
import math
import os
import threading
from bisect import bisect_right

from .. import net
from ..cff import CffWriter, geometry
from ..core import EngineParams, Selection, VariableDef, canonical_offset, \
    validate_selection
from ..errors import IncompleteStep, OpenError, SelectionError, StepOrderError
from ..container.writer import defs_digest
from ..throttle import bucket_for_dir, stream_id
from .workload import axis_split

WRITE_CHUNK = 1 << 20


def _contiguous_runs(shape: tuple[int, ...], sel: Selection, esz: int):
    """Yield (canonical byte offset, src byte start, src byte end) for the
    maximal contiguous runs of a hyper-rectangular selection."""
    ndim = len(shape)
    pivot = ndim - 1
    while pivot > 0 and sel.count[pivot] == shape[pivot]:
        pivot -= 1
    run_elems = sel.count[pivot] * math.prod(shape[pivot + 1:])
    run_nbytes = run_elems * esz
    outer = [range(sel.start[d], sel.start[d] + sel.count[d]) for d in range(pivot)]
    tail = (sel.start[pivot],) + (0,) * (ndim - pivot - 1)
    for j, idx in enumerate(itertools.product(*outer)):
        off = canonical_offset(idx + tail, shape) * esz
        yield off, j * run_nbytes, (j + 1) * run_nbytes


class _RegionService:
    """Owner side: buffer phase-1 runs, write the region after the global
    go, report completion.  Rank 0 additionally runs the step barrier."""

    def __init__(self, listener, rank: int, world: int, owners: list[int],
                 path: str, region: tuple[int, int], section: int,
                 header_end: int, bucket, latency_us: float):
        self.rank = rank
        self.world = world
        self.owners = owners
        self.region = region
        self.section = section
        self.header_end = header_end
        self.bucket = bucket
        self.latency_us = latency_us
        self.file_tag = stream_id("file", os.path.abspath(path))
        self.fd = os.open(path, os.O_RDWR)
        self.lock = threading.Condition()
        self.parts: dict[int, list[tuple[list, bytes]]] = {}
        self.ready: list[int] = []
        self.go_steps: set[int] = set()
        self.p1_done_counts: dict[int, int] = {}
        self.p2_done_counts: dict[int, int] = {}
        self.server_chans: dict[int, net.Channel] = {}
        self.rank0_chan: net.Channel | None = None  # set by engine
        self.fins = 0
        self.closing = False
        self.failure: str | None = None
        self.listener = listener
        threading.Thread(target=self._accept, daemon=True).start()
        threading.Thread(target=self._writer_loop, daemon=True).start()

    def _accept(self):
        self.listener.settimeout(60.0)
        try:
            for _ in range(self.world):
                sock, _ = self.listener.accept()
                chan = net.Channel(sock, self.latency_us)
                _, payload = chan.recv_expect(net.JOIN)
                obj, _ = net.split_obj(payload)
                sender = int(obj["rank"])
                with self.lock:
                    self.server_chans[sender] = chan
                threading.Thread(target=self._sender_loop, args=(sender, chan),
                                 daemon=True).start()
        finally:
            self.listener.close()

    def _sender_loop(self, sender: int, chan: net.Channel):
        try:
            while True:
                msg_type, payload = chan.recv()
                if msg_type == net.P1_DATA:
                    obj, body = net.split_obj(payload)
                    self._on_runs(int(obj["step"]), obj["runs"], body)
                elif msg_type == net.P1_DONE:
                    obj, _ = net.split_obj(payload)
                    self._on_p1_done(int(obj["step"]))
                elif msg_type == net.P2_DONE:
                    obj, _ = net.split_obj(payload)
                    self._on_p2_done(int(obj["step"]))
                elif msg_type == net.FIN:
                    self._on_fin()
                    return
        except EOFError:
            with self.lock:
                if not self.closing:
                    self.failure = f"rank {sender} disconnected"
                self.lock.notify_all()

    def _on_runs(self, step: int, runs: list, body: bytes):
        with self.lock:
            self.parts.setdefault(step, []).append((runs, body))
            if len(self.parts[step]) == self.world:
                self.ready.append(step)
                self.lock.notify_all()

    # -- rank 0: barrier bookkeeping -----------------------------------------

    def _on_p1_done(self, step: int):
        with self.lock:
            self.p1_done_counts[step] = self.p1_done_counts.get(step, 0) + 1
            if self.p1_done_counts[step] == self.world:
                del self.p1_done_counts[step]
                # strict phasing: writes may begin only now
                for chan in self.server_chans.values():
                    chan.send_obj(net.P2_GO, {"step": step})

    def _on_p2_done(self, step: int):
        with self.lock:
            self.p2_done_counts[step] = self.p2_done_counts.get(step, 0) + 1
            if self.p2_done_counts[step] == len(self.owners):
                del self.p2_done_counts[step]
                for chan in self.server_chans.values():
                    chan.send_obj(net.STEP_DONE, {"step": step})

    def allow_write(self, step: int):
        with self.lock:
            self.go_steps.add(step)
            self.lock.notify_all()

    # -- phase 2 ----------------------------------------------------------------

    def _writer_loop(self):
        while True:
            with self.lock:
                while not self.ready and not self.closing:
                    self.lock.wait(0.2)
                if not self.ready and self.closing:
                    return
                step = self.ready[0]
                while step not in self.go_steps and not self.closing:
                    self.lock.wait(0.2)
                if self.closing:
                    return
                self.ready.pop(0)
                self.go_steps.discard(step)
            self._write_region(step)

    def _write_region(self, step: int):
        lo, hi = self.region
        buf = bytearray(hi - lo)
        with self.lock:
            parts = self.parts.pop(step)
        total = 0
        for runs, body in parts:
            pos = 0
            for off, nbytes in runs:
                buf[off - lo:off - lo + nbytes] = body[pos:pos + nbytes]
                pos += nbytes
                total += nbytes
        if total != hi - lo:
            with self.lock:
                self.failure = f"step {step}: region got {total} of {hi - lo} bytes"
                self.lock.notify_all()
            return
        file_off = self.header_end + step * self.section + lo
        view = memoryview(bytes(buf))
        pos = 0
        while pos < len(view):
            chunk = view[pos:pos + WRITE_CHUNK]
            if self.bucket is not None:
                self.bucket.acquire(len(chunk), stream_id("region", self.rank),
                                    file_tag=self.file_tag)
            os.pwrite(self.fd, chunk, file_off + pos)
            pos += len(chunk)
        self.rank0_chan.send_obj(net.P2_DONE, {"step": step, "rank": self.rank})

    def _on_fin(self):
        with self.lock:
            self.fins += 1
            last = self.fins == self.world
        if last:
            os.fsync(self.fd)
            # rank 0 last: its process exits once acked, which would cut off
            # acks still queued for other ranks
            for sender in sorted(self.server_chans, key=lambda r: (r == 0, r)):
                self.server_chans[sender].send(net.FIN)

    def close(self):
        with self.lock:
            self.closing = True
            self.lock.notify_all()
        os.close(self.fd)


class TwoPhaseEngine:
    def __init__(self, out_path: str, params: EngineParams,
                 defs: list[VariableDef], topology: dict, exchange):
        if params.codec.codec != "none":
            raise OpenError("shared_two_phase does not allow data compression")
        self.params = params
        self.defs = list(defs)
        self._by_name = {v.name: v for v in self.defs}
        self._var_index = {v.name: i for i, v in enumerate(self.defs)}
        self.rank = int(topology["rank"])
        self.world = int(topology["world_size"])
        rpn = int(topology.get("ranks_per_node", self.world))
        steps_total = int(topology["steps_total"])
        self.current_step = 0
        latency = params.comm_latency_us or 0.0

        # collective-buffering owners: the lead rank of each node
        self.owner_ranks = list(range(0, self.world, rpn))
        self.geo = geometry(steps_total, self.defs)
        bounds = axis_split(self.geo.section_nbytes, len(self.owner_ranks))
        self.region_starts = [b[0] for b in bounds]

        listener = None
        local: dict = {"defs": defs_digest(self.defs)}
        if self.rank == 0:
            CffWriter(out_path, self.defs, steps_total).close()  # header + size
        if self.rank in self.owner_ranks:
            listener = net.listener()
            local["tp"] = list(listener.getsockname())
        peers = exchange(local)
        if len({p["defs"] for p in peers.values()}) != 1:
            raise OpenError("inconsistent variable definitions across ranks")

        self.service = None
        if self.rank in self.owner_ranks:
            idx = self.owner_ranks.index(self.rank)
            region = (bounds[idx][0], bounds[idx][0] + bounds[idx][1])
            bucket = bucket_for_dir(params.pfs_dir, params.pfs_bw_mbps)
            self.service = _RegionService(listener, self.rank, self.world,
                                          self.owner_ranks, out_path, region,
                                          self.geo.section_nbytes,
                                          self.geo.header_end, bucket, latency)
        self.owner_chans: dict[int, net.Channel] = {}
        for owner in self.owner_ranks:
            ep = peers[owner]["tp"]
            chan = net.connect(ep[0], ep[1], latency)
            chan.send_obj(net.JOIN, {"rank": self.rank})
            self.owner_chans[owner] = chan
        if self.service is not None:
            self.service.rank0_chan = self.owner_chans[0]
        self._pending: dict[int, list[tuple[int, bytes]]] = {}

    # -- phase-1 split ----------------------------------------------------------

    def put(self, var: str, step: int, sel: Selection, data: bytes) -> None:
        if step != self.current_step:
            raise StepOrderError(f"put for step {step}, session at {self.current_step}")
        vdef = self._by_name.get(var)
        if vdef is None:
            raise SelectionError(f"unknown variable {var!r}")
        validate_selection(sel, vdef)
        esz = vdef.dtype.elem_size
        if len(data) != sel.nelems * esz:
            raise SelectionError(f"bad byte count for {var!r}")
        var_base = self.geo.var_prefix[self._var_index[var]]
        runs = self._pending.setdefault(step, [])
        for sect_off, lo, hi in _contiguous_runs(vdef.global_shape, sel, esz):
            runs.append((var_base + sect_off, data[lo:hi]))

    def end_step(self) -> None:
        step = self.current_step
        runs = self._pending.pop(step, [])
        per_owner: dict[int, tuple[list, list]] = \
            {k: ([], []) for k in range(len(self.owner_ranks))}
        for off, row in runs:
            self._split_row(off, row, per_owner)
        for idx, owner in enumerate(self.owner_ranks):
            offs, bodies = per_owner[idx]
            self.owner_chans[owner].send_obj(
                net.P1_DATA,
                {"step": step, "runs": [[o, len(b)] for o, b in zip(offs, bodies)]},
                b"".join(bodies))
        self.owner_chans[0].send_obj(net.P1_DONE, {"step": step, "rank": self.rank})
        # phase barrier, then completion barrier: no owner writes before every
        # rank finished redistributing; end_step returns once every owner
        # wrote its region
        while True:
            msg_type, payload = self.owner_chans[0].recv_expect(
                net.P2_GO, net.STEP_DONE, net.ABORT)
            obj, _ = net.split_obj(payload)
            if msg_type == net.P2_GO:
                if self.service is not None:
                    self.service.allow_write(int(obj["step"]))
            elif msg_type == net.STEP_DONE:
                break
            else:
                raise IncompleteStep(obj.get("error") or "two-phase step aborted")
        self.current_step += 1

    def _split_row(self, off: int, row: bytes, per_owner: dict):
        end = off + len(row)
        pos = off
        while pos < end:
            idx = bisect_right(self.region_starts, pos) - 1
            region_end = (self.region_starts[idx + 1]
                          if idx + 1 < len(self.region_starts)
                          else self.geo.section_nbytes)
            take = min(end, region_end) - pos
            offs, bodies = per_owner[idx]
            offs.append(pos)
            bodies.append(row[pos - off:pos - off + take])
            pos += take

    def close(self) -> dict:
        self.owner_chans[0].send(net.FIN)
        self.owner_chans[0].recv_expect(net.FIN)
        if self.service is not None:
            self.service.close()
        for chan in self.owner_chans.values():
            chan.close()
        return {"rank": self.rank}
