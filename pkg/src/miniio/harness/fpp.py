"""File-per-process mode: each rank writes a self-contained part file with a
footer index; a stitcher merges parts back into the canonical flat format.

Part layout: magic "PFP1", u64 LE header length, header JSON, appended block
bodies, footer JSON {steps:[{step, blocks[]}...]}, u64 LE footer length,
trailer magic "PFPF".
"""
from __future__ import annotations

import json
import os

from ..codecs import StoredPayload, decode, encode
from ..core import (BlockRecord, EngineParams, Selection, VariableDef, crc32c,
                    dtype_for, validate_selection, _block_from_obj, _block_to_obj)
from ..errors import CorruptBlock, FormatError, SelectionError, StepOrderError
from ..throttle import stream_id, write_throttled
from .workload import WorkloadSpec  # noqa: F401  (part headers echo workload grids)

MAGIC = b"PFP1"
TRAILER = b"PFPF"


def part_name(rank: int) -> str:
    return f"part.{rank}.pfp"


class FppWriter:
    """One rank's part file; no inter-rank communication at all."""

    def __init__(self, path: str, params: EngineParams, defs: list[VariableDef],
                 rank: int, world_size: int, bucket):
        self.params = params
        self.defs = list(defs)
        self._by_name = {v.name: v for v in self.defs}
        self.rank = rank
        self.world_size = world_size
        self.bucket = bucket
        self.current_step = 0
        self._step_blocks: list[BlockRecord] = []
        self._steps: list[dict] = []
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._f = open(path, "wb")
        header = json.dumps({
            "format_version": 1, "rank": rank, "world_size": world_size,
            "variables": [{"name": v.name, "dtype": v.dtype.tag,
                           "shape": list(v.global_shape)} for v in self.defs],
        }, separators=(",", ":")).encode()
        self._f.write(MAGIC)
        self._f.write(len(header).to_bytes(8, "little"))
        self._f.write(header)
        self.offset = self._f.tell()

    def put(self, var: str, step: int, sel: Selection, data: bytes) -> None:
        if step != self.current_step:
            raise StepOrderError(
                f"put for step {step} while part writer is at step {self.current_step}")
        vdef = self._by_name.get(var)
        if vdef is None:
            raise SelectionError(f"unknown variable {var!r}")
        validate_selection(sel, vdef)
        if len(data) != sel.nelems * vdef.dtype.elem_size:
            raise SelectionError(f"bad byte count for {var!r}")
        from ..container.writer import stats_of
        lo, hi = stats_of(data, vdef)
        payload = encode(data, vdef.dtype.elem_size, self.params.codec)
        write_throttled(self._f, payload.body, self.bucket,
                        stream=stream_id("part", self.rank))
        self._step_blocks.append(BlockRecord(
            var=var, step=step, writer_rank=self.rank,
            selection=sel, subfile_id=self.rank, offset=self.offset,
            stored_nbytes=len(payload.body), raw_nbytes=payload.raw_nbytes,
            codec=payload.spec, checksum_raw=crc32c(data),
            stat_min=lo, stat_max=hi))
        self.offset += len(payload.body)

    def end_step(self) -> None:
        self._f.flush()
        self._steps.append({"step": self.current_step,
                            "blocks": [_block_to_obj(b) for b in self._step_blocks]})
        self._step_blocks = []
        self.current_step += 1

    def close(self) -> dict:
        footer = json.dumps({"steps": self._steps}, separators=(",", ":")).encode()
        self._f.write(footer)
        self._f.write(len(footer).to_bytes(8, "little"))
        self._f.write(TRAILER)
        self._f.flush()
        os.fsync(self._f.fileno())
        nbytes = self._f.tell()
        self._f.close()
        return {"rank": self.rank, "bytes_written": nbytes}


class PartReader:
    def __init__(self, path: str):
        self.path = path
        self._f = open(path, "rb")
        if self._f.read(4) != MAGIC:
            raise FormatError(f"{path} is not a part file")
        header_len = int.from_bytes(self._f.read(8), "little")
        header = json.loads(self._f.read(header_len))
        self.rank = int(header["rank"])
        self.world_size = int(header["world_size"])
        self.defs = [VariableDef(v["name"], dtype_for(v["dtype"]), tuple(v["shape"]))
                     for v in header["variables"]]
        self._by_name = {v.name: v for v in self.defs}
        self._f.seek(-12, os.SEEK_END)
        footer_len = int.from_bytes(self._f.read(8), "little")
        if self._f.read(4) != TRAILER:
            raise FormatError(f"{path} has no footer trailer (incomplete part?)")
        self._f.seek(-(12 + footer_len), os.SEEK_END)
        footer = json.loads(self._f.read(footer_len))
        self.steps: dict[int, list[BlockRecord]] = {}
        for entry in footer["steps"]:
            blocks = [_block_from_obj(b, 0) for b in entry["blocks"]]
            self.steps[int(entry["step"])] = blocks

    def fetch_raw(self, block: BlockRecord) -> bytes:
        self._f.seek(block.offset)
        body = self._f.read(block.stored_nbytes)
        if len(body) != block.stored_nbytes:
            raise FormatError(f"{self.path} truncated at offset {block.offset}")
        vdef = self._by_name[block.var]
        raw = decode(StoredPayload(block.raw_nbytes, block.codec.codec,
                                   block.codec.level, block.codec.shuffle,
                                   vdef.dtype.elem_size, body))
        if crc32c(raw) != block.checksum_raw:
            raise CorruptBlock(f"checksum mismatch in {self.path} at {block.offset}",
                               subfile=block.subfile_id, offset=block.offset)
        return raw

    def close(self):
        self._f.close()


def part_paths(parts_dir: str) -> list[str]:
    names = sorted((p for p in os.listdir(parts_dir) if p.endswith(".pfp")),
                   key=lambda n: int(n.split(".")[1]))
    return [os.path.join(parts_dir, n) for n in names]
