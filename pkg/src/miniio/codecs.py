"""In-line lossless block compression with an optional byte-shuffle pre-filter.

Codec identifiers are "none", "lz4", "zstd", "zlib".  Bodies conform to the
public lz4-frame, zstd-frame and zlib stream formats so foreign readers can
decode them with stock tools.  The "Blosc-style" configuration is represented
as shuffle=true + lz4 (documented mapping; there is no ubiquitous independent
BloscLZ implementation).
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, FormatError, ShapeError

__all__ = ["CodecSpec", "StoredPayload", "encode", "decode",
           "shuffle_bytes", "unshuffle_bytes", "CODEC_NAMES"]

CODEC_NAMES = ("none", "lz4", "zstd", "zlib")

_DEFAULT_LEVELS = {"none": 0, "lz4": 1, "zstd": 3, "zlib": 6}
# zstd officially supports negative ("fast") levels
_LEVEL_RANGES = {"lz4": (1, 12), "zstd": (-22, 22), "zlib": (1, 9)}


@dataclass(frozen=True)
class CodecSpec:
    codec: str = "none"
    level: int | None = None
    shuffle: bool = False

    def __post_init__(self):
        if self.codec not in CODEC_NAMES:
            raise ValueError(f"unknown codec {self.codec!r}; expected one of {CODEC_NAMES}")
        if self.codec == "none":
            # level is ignored and shuffle is off by definition
            object.__setattr__(self, "level", 0)
            object.__setattr__(self, "shuffle", False)
            return
        level = _DEFAULT_LEVELS[self.codec] if self.level is None else int(self.level)
        lo, hi = _LEVEL_RANGES[self.codec]
        if not lo <= level <= hi:
            raise ValueError(f"{self.codec} level {level} outside [{lo}, {hi}]")
        object.__setattr__(self, "level", level)

    @classmethod
    def none(cls) -> "CodecSpec":
        return cls("none")

    @classmethod
    def default(cls) -> "CodecSpec":
        # zstd level 3 with shuffle: the preferred configuration once
        # compression is enabled.
        return cls("zstd", 3, True)


@dataclass(frozen=True)
class StoredPayload:
    """A block as stored in a sub-file or sent over a dataplane."""
    raw_nbytes: int
    codec: str
    level: int
    shuffle: bool
    elem_size: int
    body: bytes

    def header_obj(self) -> dict:
        return {"raw_nbytes": self.raw_nbytes, "codec": self.codec,
                "level": self.level, "shuffle": self.shuffle,
                "elem_size": self.elem_size}

    def header_json(self) -> bytes:
        return json.dumps(self.header_obj(), separators=(",", ":")).encode()

    @classmethod
    def from_header(cls, obj: dict, body: bytes) -> "StoredPayload":
        return cls(raw_nbytes=int(obj["raw_nbytes"]), codec=obj["codec"],
                   level=int(obj["level"]), shuffle=bool(obj["shuffle"]),
                   elem_size=int(obj["elem_size"]), body=body)

    @property
    def spec(self) -> CodecSpec:
        return CodecSpec(self.codec, self.level, self.shuffle)


def shuffle_bytes(raw: bytes, elem_size: int) -> bytes:
    """Group byte lane i of every element contiguously:
    out[i*n + j] = raw[j*elem_size + i] for n elements."""
    if elem_size == 1:
        return bytes(raw)
    if len(raw) % elem_size:
        raise ShapeError(f"length {len(raw)} not divisible by elem_size {elem_size}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(-1, elem_size).T.tobytes()


def unshuffle_bytes(shuffled: bytes, elem_size: int) -> bytes:
    if elem_size == 1:
        return bytes(shuffled)
    if len(shuffled) % elem_size:
        raise ShapeError(f"length {len(shuffled)} not divisible by elem_size {elem_size}")
    return np.frombuffer(shuffled, dtype=np.uint8).reshape(elem_size, -1).T.tobytes()


# ---------------------------------------------------------------------------

_PA_CODECS: dict[tuple[str, int], object] = {}


def _pa_codec(name: str, level: int):
    key = (name, level)
    codec = _PA_CODECS.get(key)
    if codec is None:
        import pyarrow as pa
        codec = pa.Codec(name, compression_level=level)
        _PA_CODECS[key] = codec
    return codec


def _compress(name: str, level: int, data: bytes) -> bytes:
    if name == "zlib":
        return zlib.compress(data, level)
    return _pa_codec(name, level).compress(data, asbytes=True)


def _decompress(name: str, level: int, body: bytes, out_nbytes: int) -> bytes:
    try:
        if name == "zlib":
            return zlib.decompress(body)
        return _pa_codec(name, level).decompress(body, decompressed_size=out_nbytes,
                                                 asbytes=True)
    except Exception as exc:
        raise CodecError(f"{name} body could not be decoded: {exc}") from exc


def encode(raw: bytes, elem_size: int, spec: CodecSpec) -> StoredPayload:
    """Shuffle (optionally) then compress one block.

    Never fails on valid input: when the compressed body would not be smaller
    than the raw bytes, the raw bytes are stored and the header records
    codec=none (store-uncompressed fallback).
    """
    raw = bytes(raw)
    if spec.codec == "none":
        return StoredPayload(len(raw), "none", 0, False, elem_size, raw)
    body = shuffle_bytes(raw, elem_size) if spec.shuffle else raw
    comp = _compress(spec.codec, spec.level, body)
    if len(comp) >= len(raw):
        return StoredPayload(len(raw), "none", 0, False, elem_size, raw)
    return StoredPayload(len(raw), spec.codec, spec.level, spec.shuffle,
                         elem_size, comp)


def decode(p: StoredPayload) -> bytes:
    """Inverse of :func:`encode`; bit-exact for every codec/level/shuffle."""
    if p.codec == "none":
        if len(p.body) != p.raw_nbytes:
            raise FormatError(
                f"codec none body is {len(p.body)} bytes, header says {p.raw_nbytes}")
        return p.body
    data = _decompress(p.codec, p.level, p.body, p.raw_nbytes)
    if p.shuffle:
        if len(data) % p.elem_size:
            raise FormatError(
                f"decoded length {len(data)} not divisible by elem_size {p.elem_size}")
        data = unshuffle_bytes(data, p.elem_size)
    if len(data) != p.raw_nbytes:
        raise FormatError(
            f"decoded {len(data)} bytes, header says {p.raw_nbytes}")
    return data
