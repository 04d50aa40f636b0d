"""Step-indexed container reading with checksum verification."""
from __future__ import annotations

import os

from ..codecs import StoredPayload, decode
from ..core import (BlockRecord, Selection, StepIndex, assemble_selection,
                    crc32c, index_parse)
from ..errors import CorruptBlock, OpenError, ParseError
from .layout import read_info


def load_index_lines(path: str) -> list[StepIndex]:
    """Parse index.jsonl tolerantly: a truncated or partial final line is
    ignored (crash consistency); malformed interior lines are errors."""
    steps: list[StepIndex] = []
    try:
        with open(path, "rb") as f:
            raw_lines = f.read().split(b"\n")
    except FileNotFoundError:
        return steps
    for i, raw in enumerate(raw_lines):
        if not raw:
            continue
        try:
            idx = index_parse(raw.decode("utf-8", errors="strict"))
        except (ParseError, UnicodeDecodeError) as exc:
            if i >= len(raw_lines) - 2:  # final (possibly unterminated) line
                break
            raise ParseError(f"index line {i}: {exc}") from exc
        if idx.complete:
            steps.append(idx)
    return steps


class ReaderSession:
    def __init__(self, dir_path: str):
        if not os.path.isdir(dir_path):
            raise OpenError(f"{dir_path} is not a container directory")
        self.layout, self.info, self.defs = read_info(dir_path)
        self._by_name = {v.name: v for v in self.defs}
        self._steps = load_index_lines(self.layout.index_path)
        self._by_step = {s.step: s for s in self._steps}
        self._files: dict[int, object] = {}

    def steps(self):
        """Step ids with a complete index line, in file order."""
        for idx in self._steps:
            yield idx.step

    def step_index(self, step: int) -> StepIndex:
        try:
            return self._by_step[step]
        except KeyError:
            raise OpenError(f"step {step} not present in container") from None

    def variable(self, name: str):
        try:
            return self._by_name[name]
        except KeyError:
            raise OpenError(f"variable {name!r} not declared in container") from None

    def _subfile(self, subfile_id: int):
        f = self._files.get(subfile_id)
        if f is None:
            path = self.layout.subfile_path(subfile_id)
            try:
                f = open(path, "rb")
            except FileNotFoundError:
                raise OpenError(f"missing sub-file {path}") from None
            self._files[subfile_id] = f
        return f

    def fetch_raw(self, block: BlockRecord) -> bytes:
        """Stored payload -> raw bytes, verifying the raw-byte checksum."""
        f = self._subfile(block.subfile_id)
        f.seek(block.offset)
        body = f.read(block.stored_nbytes)
        if len(body) != block.stored_nbytes:
            raise CorruptBlock(
                f"sub-file {block.subfile_id} truncated at {block.offset}",
                subfile=block.subfile_id, offset=block.offset)
        vdef = self._by_name[block.var]
        payload = StoredPayload(
            raw_nbytes=block.raw_nbytes, codec=block.codec.codec,
            level=block.codec.level, shuffle=block.codec.shuffle,
            elem_size=vdef.dtype.elem_size, body=body)
        raw = decode(payload)
        if crc32c(raw) != block.checksum_raw:
            raise CorruptBlock(
                f"checksum mismatch for {block.var!r} step {block.step} "
                f"rank {block.writer_rank}",
                subfile=block.subfile_id, offset=block.offset)
        return raw

    def read(self, var: str, step: int, sel: Selection) -> bytes:
        """Assemble ``sel`` of ``var`` at ``step`` in canonical layout,
        verifying the checksum of every touched block."""
        vdef = self.variable(var)
        idx = self.step_index(step)
        return assemble_selection(vdef, sel, idx.blocks_for(var), self.fetch_raw)

    def read_full(self, var: str, step: int) -> bytes:
        vdef = self.variable(var)
        return self.read(var, step, Selection((0,) * len(vdef.global_shape),
                                              vdef.global_shape))

    def close(self) -> None:
        for f in self._files.values():
            f.close()
        self._files.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def reader_open(dir_path: str) -> ReaderSession:
    return ReaderSession(dir_path)
