"""Canonical flat file: the single-file layout every file-producing mode
converges to.

Layout: magic "CFF1", u64 little-endian header length, header JSON
{format_version, steps, variables[]}, then the data section: for each step,
for each variable in definition order, the full global array in canonical
row-major little-endian layout.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

from .core import VariableDef, dtype_for
from .errors import FormatError
from .throttle import SharedBucket, stream_id, write_throttled

MAGIC = b"CFF1"
FORMAT_VERSION = 1


def _header_bytes(steps: int, variables: list[VariableDef]) -> bytes:
    obj = {
        "format_version": FORMAT_VERSION,
        "steps": steps,
        "variables": [
            {"name": v.name, "dtype": v.dtype.tag, "shape": list(v.global_shape)}
            for v in variables
        ],
    }
    return json.dumps(obj, separators=(",", ":")).encode()


@dataclass(frozen=True)
class CffGeometry:
    """Byte offsets of the data section."""
    header_end: int
    var_nbytes: tuple[int, ...]
    var_prefix: tuple[int, ...]
    section_nbytes: int

    def data_offset(self, step: int, var_index: int) -> int:
        return self.header_end + step * self.section_nbytes + self.var_prefix[var_index]


def geometry(steps: int, variables: list[VariableDef]) -> CffGeometry:
    header = _header_bytes(steps, variables)
    header_end = len(MAGIC) + 8 + len(header)
    sizes = tuple(v.nbytes for v in variables)
    prefix = []
    acc = 0
    for s in sizes:
        prefix.append(acc)
        acc += s
    return CffGeometry(header_end, sizes, tuple(prefix), acc)


class CffWriter:
    """Writes the canonical format; supports sequential or at-offset writes."""

    def __init__(self, path: str, variables: list[VariableDef], steps: int,
                 bucket: SharedBucket | None = None):
        self.path = path
        self.variables = list(variables)
        self.steps = steps
        self.geo = geometry(steps, self.variables)
        self.bucket = bucket
        self.stream = stream_id("cff", os.path.abspath(path))
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._f = open(path, "w+b")
        header = _header_bytes(steps, self.variables)
        self._f.write(MAGIC)
        self._f.write(len(header).to_bytes(8, "little"))
        self._f.write(header)

    def write_var(self, step: int, var_index: int, data: bytes) -> None:
        expected = self.geo.var_nbytes[var_index]
        if len(data) != expected:
            raise FormatError(f"variable {var_index} expects {expected} bytes, got {len(data)}")
        self._f.seek(self.geo.data_offset(step, var_index))
        write_throttled(self._f, data, self.bucket, stream=self.stream)

    def write_at(self, file_offset: int, data: bytes) -> None:
        self._f.seek(file_offset)
        write_throttled(self._f, data, self.bucket, stream=self.stream)

    def flush(self) -> None:
        self._f.flush()

    def close(self) -> None:
        # size the file even if the tail was never written
        total = self.geo.header_end + self.steps * self.geo.section_nbytes
        self._f.flush()
        if os.fstat(self._f.fileno()).st_size < total:
            self._f.truncate(total)
        self._f.close()


class CffReader:
    def __init__(self, path: str):
        self.path = path
        self._f = open(path, "rb")
        if self._f.read(4) != MAGIC:
            raise FormatError(f"{path} is not a canonical flat file")
        header_len = int.from_bytes(self._f.read(8), "little")
        try:
            header = json.loads(self._f.read(header_len))
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad flat file header: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported format_version {header.get('format_version')}")
        self.steps = int(header["steps"])
        self.variables = [
            VariableDef(v["name"], dtype_for(v["dtype"]), tuple(v["shape"]))
            for v in header["variables"]
        ]
        self.geo = geometry(self.steps, self.variables)
        self._names = {v.name: i for i, v in enumerate(self.variables)}

    def var_index(self, name: str) -> int:
        return self._names[name]

    def read_var(self, step: int, var: int | str) -> bytes:
        idx = self._names[var] if isinstance(var, str) else var
        if not 0 <= step < self.steps:
            raise IndexError(f"step {step} outside [0, {self.steps})")
        self._f.seek(self.geo.data_offset(step, idx))
        n = self.geo.var_nbytes[idx]
        data = self._f.read(n)
        if len(data) != n:
            raise FormatError(f"flat file truncated at step {step} var {idx}")
        return data

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def files_equal(path_a: str, path_b: str, chunk: int = 1 << 20) -> bool:
    if os.path.getsize(path_a) != os.path.getsize(path_b):
        return False
    with open(path_a, "rb") as fa, open(path_b, "rb") as fb:
        while True:
            a = fa.read(chunk)
            b = fb.read(chunk)
            if a != b:
                return False
            if not a:
                return True
