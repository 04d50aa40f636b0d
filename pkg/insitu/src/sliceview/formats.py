"""Readers for the producer's published formats.

Index lines are JSON objects, one per step, with block entries locating
stored payloads inside sub-files.  Stored bodies are raw bytes or standard
lz4-frame / zstd-frame / zlib streams, optionally byte-shuffled before
compression.  The canonical flat file is magic "CFF1", a u64-LE header
length, a JSON header, then full arrays per step and variable.
"""
from __future__ import annotations

import json
import os
import zlib

import numpy as np

NP_DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "i64": "<i8", "u8": "u1"}
ELEM_SIZES = {"f32": 4, "f64": 8, "i32": 4, "i64": 8, "u8": 1}


class FormatError(Exception):
    pass


# ---------------------------------------------------------------------------
# payload decoding

def unshuffle(body: bytes, elem_size: int) -> bytes:
    if elem_size == 1:
        return body
    return np.frombuffer(body, dtype=np.uint8).reshape(elem_size, -1).T.tobytes()


def decode_body(body: bytes, codec: str, level: int, shuffle: bool,
                raw_nbytes: int, elem_size: int) -> bytes:
    if codec == "none":
        data = body
    elif codec == "zlib":
        data = zlib.decompress(body)
    elif codec in ("zstd", "lz4"):
        import pyarrow as pa
        data = pa.Codec(codec).decompress(body, decompressed_size=raw_nbytes,
                                          asbytes=True)
    else:
        raise FormatError(f"unknown codec {codec!r}")
    if shuffle:
        data = unshuffle(data, elem_size)
    if len(data) != raw_nbytes:
        raise FormatError(f"decoded {len(data)} bytes, expected {raw_nbytes}")
    return data


_CRC_TABLE = None


def crc32c(data: bytes) -> int:
    """CRC32C (Castagnoli), for spot-checking stored blocks."""
    global _CRC_TABLE
    if _CRC_TABLE is None:
        table = []
        for i in range(256):
            c = i
            for _ in range(8):
                c = (0x82F63B78 ^ (c >> 1)) if (c & 1) else (c >> 1)
            table.append(c)
        _CRC_TABLE = table
    crc = 0xFFFFFFFF
    for byte in data:
        crc = _CRC_TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


# ---------------------------------------------------------------------------
# index lines

REQUIRED_BLOCK_KEYS = ("var", "step", "rank", "start", "count", "subfile",
                       "offset", "stored", "raw", "codec", "level", "shuffle",
                       "crc32c", "min", "max")


def parse_index_line(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad index line: {exc}") from exc
    for key in ("step", "complete", "blocks"):
        if key not in obj:
            raise FormatError(f"index line missing {key!r}")
    for block in obj["blocks"]:
        missing = [k for k in REQUIRED_BLOCK_KEYS if k not in block]
        if missing:
            raise FormatError(f"block missing keys {missing}")
    return obj


def load_index(path: str) -> list[dict]:
    steps = []
    try:
        with open(path, "rb") as f:
            lines = f.read().split(b"\n")
    except FileNotFoundError:
        return steps
    for i, raw in enumerate(lines):
        if not raw:
            continue
        try:
            obj = parse_index_line(raw.decode())
        except (FormatError, UnicodeDecodeError):
            if i >= len(lines) - 2:
                break  # torn final line: the step never committed
            raise
        if obj.get("complete"):
            steps.append(obj)
    return steps


# ---------------------------------------------------------------------------
# slice assembly

def slice_from_blocks(blocks: list[dict], fetch, var_shape: tuple[int, ...],
                      np_dtype: str, level: int) -> tuple[np.ndarray, float, float]:
    """Assemble the z=level plane of a 3D variable from its blocks.

    ``fetch(block) -> raw bytes`` supplies decoded block payloads.  Returns
    (plane, announced_min, announced_max) where the min/max are the bounds
    over the touched blocks' recorded statistics."""
    nx, ny, nz = var_shape
    if not 0 <= level < nz:
        raise FormatError(f"level {level} outside [0, {nz})")
    plane = np.zeros((nx, ny), dtype=np_dtype)
    covered = np.zeros((nx, ny), dtype=bool)
    lo = float("inf")
    hi = float("-inf")
    for block in blocks:
        (xs, ys, zs), (xc, yc, zc) = block["start"], block["count"]
        if not zs <= level < zs + zc:
            continue
        raw = fetch(block)
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(xc, yc, zc)
        plane[xs:xs + xc, ys:ys + yc] = arr[:, :, level - zs]
        covered[xs:xs + xc, ys:ys + yc] = True
        lo = min(lo, block["min"])
        hi = max(hi, block["max"])
    if not covered.all():
        raise FormatError(f"slice z={level} not fully covered by blocks")
    return plane, lo, hi


# ---------------------------------------------------------------------------
# sources

class ContainerSource:
    """Reads a sub-file container directory."""

    def __init__(self, path: str, check_crc: bool = True):
        with open(os.path.join(path, "info.json")) as f:
            self.info = json.load(f)
        self.variables = {v["name"]: (v["dtype"], tuple(v["shape"]))
                          for v in self.info["variables"]}
        self._dir = path
        self._data_dir = self.info.get("data_dir", path)
        self._index = load_index(os.path.join(path, "index.jsonl"))
        self._files = {}
        self.check_crc = check_crc

    def _fetch(self, block: dict) -> bytes:
        f = self._files.get(block["subfile"])
        if f is None:
            f = open(os.path.join(self._data_dir, f"data.{block['subfile']}"), "rb")
            self._files[block["subfile"]] = f
        f.seek(block["offset"])
        body = f.read(block["stored"])
        dtype, _ = self.variables[block["var"]]
        raw = decode_body(body, block["codec"], block["level"], block["shuffle"],
                          block["raw"], ELEM_SIZES[dtype])
        if self.check_crc and crc32c(raw) != int(block["crc32c"], 16):
            raise FormatError(
                f"checksum mismatch in sub-file {block['subfile']} "
                f"at offset {block['offset']}")
        return raw

    def steps(self):
        for entry in self._index:
            yield entry["step"], entry["blocks"]

    def slice_plane(self, blocks, var: str, level: int):
        dtype, shape = self.variables[var]
        mine = [b for b in blocks if b["var"] == var]
        if not mine:
            raise FormatError(f"variable {var!r} not in step")
        return slice_from_blocks(mine, self._fetch, shape, NP_DTYPES[dtype], level)

    def close(self):
        for f in self._files.values():
            f.close()


class FlatSource:
    """Reads a canonical flat file."""

    def __init__(self, path: str):
        self._f = open(path, "rb")
        if self._f.read(4) != b"CFF1":
            raise FormatError(f"{path} is not a canonical flat file")
        header_len = int.from_bytes(self._f.read(8), "little")
        header = json.loads(self._f.read(header_len))
        self.nsteps = int(header["steps"])
        self.variables = {v["name"]: (v["dtype"], tuple(v["shape"]))
                          for v in header["variables"]}
        self._order = [v["name"] for v in header["variables"]]
        self._header_end = 4 + 8 + header_len
        self._sizes = {name: int(np.prod(shape)) * ELEM_SIZES[dtype]
                       for name, (dtype, shape) in self.variables.items()}
        self._section = sum(self._sizes.values())

    def steps(self):
        for step in range(self.nsteps):
            yield step, step

    def slice_plane(self, handle, var: str, level: int):
        return self._read_slice(int(handle), var, level)

    def _read_slice(self, step: int, var: str, level: int):
        dtype, shape = self.variables[var]
        nx, ny, nz = shape
        if not 0 <= level < nz:
            raise FormatError(f"level {level} outside [0, {nz})")
        var_off = 0
        for name in self._order:
            if name == var:
                break
            var_off += self._sizes[name]
        self._f.seek(self._header_end + step * self._section + var_off)
        data = self._f.read(self._sizes[var])
        arr = np.frombuffer(data, dtype=NP_DTYPES[dtype]).reshape(shape)
        plane = np.ascontiguousarray(arr[:, :, level])
        return plane, float(arr.min()), float(arr.max())

    def close(self):
        self._f.close()
