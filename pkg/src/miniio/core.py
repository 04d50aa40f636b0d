"""Domain types, canonical array layout math, index (de)serialization, checksums.

Everything here is an immutable value type or a pure function; instances are
safe to share between threads and processes without coordination.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .codecs import CodecSpec
from .errors import DuplicateBlock, ParseError, SelectionError

try:
    from ._crc32c import crc32c as _crc32c_native
except ImportError:  # pragma: no cover - built extension normally present
    _crc32c_native = None

__all__ = [
    "Dtype", "DTYPES", "VariableDef", "Selection", "BlockRecord", "StepIndex",
    "EngineParams", "MODES", "canonical_offset", "validate_selection",
    "crc32c", "index_merge", "index_serialize", "index_parse",
    "intersect_selections", "assemble_selection",
]


# ---------------------------------------------------------------------------
# dtypes

@dataclass(frozen=True)
class Dtype:
    tag: str
    elem_size: int

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(_NUMPY_TAGS[self.tag])


_NUMPY_TAGS = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "i64": "<i8", "u8": "u1"}

DTYPES = {
    "f32": Dtype("f32", 4),
    "f64": Dtype("f64", 8),
    "i32": Dtype("i32", 4),
    "i64": Dtype("i64", 8),
    "u8": Dtype("u8", 1),
}


def dtype_for(tag: str) -> Dtype:
    try:
        return DTYPES[tag]
    except KeyError:
        raise ValueError(f"unknown dtype tag {tag!r}") from None


@dataclass(frozen=True)
class VariableDef:
    """A named, typed, globally shaped array declared per session.

    Time is never part of ``global_shape``; it is the step axis.
    """
    name: str
    dtype: Dtype
    global_shape: tuple[int, ...]
    step_varying: bool = True

    def __post_init__(self):
        if not self.name:
            raise ValueError("variable name must be non-empty")
        if not 1 <= len(self.global_shape) <= 4:
            raise ValueError("global_shape must have 1-4 dimensions")
        if any(d < 1 for d in self.global_shape):
            raise ValueError("global_shape dimensions must be >= 1")
        object.__setattr__(self, "global_shape", tuple(int(d) for d in self.global_shape))

    @property
    def nbytes(self) -> int:
        return math.prod(self.global_shape) * self.dtype.elem_size


@dataclass(frozen=True)
class Selection:
    """One rank's hyper-rectangular patch of a variable."""
    start: tuple[int, ...]
    count: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        object.__setattr__(self, "count", tuple(int(v) for v in self.count))

    @property
    def nelems(self) -> int:
        return math.prod(self.count)


# ---------------------------------------------------------------------------
# layout math

def canonical_offset(point: Sequence[int], global_shape: Sequence[int]) -> int:
    """Linear element index of ``point`` in the row-major (last axis fastest)
    canonical layout of ``global_shape``."""
    if len(point) != len(global_shape):
        raise IndexError(f"point rank {len(point)} != shape rank {len(global_shape)}")
    off = 0
    for p, n in zip(point, global_shape):
        if not 0 <= p < n:
            raise IndexError(f"point {tuple(point)} outside shape {tuple(global_shape)}")
        off = off * n + p
    return off


def validate_selection(sel: Selection, vdef: VariableDef) -> None:
    """Raise :class:`SelectionError` naming the offending axis if ``sel``
    does not fit ``vdef.global_shape``."""
    shape = vdef.global_shape
    if len(sel.start) != len(shape) or len(sel.count) != len(shape):
        raise SelectionError(
            f"selection rank {len(sel.start)} does not match "
            f"variable {vdef.name!r} rank {len(shape)}")
    for axis, (s, c, n) in enumerate(zip(sel.start, sel.count, shape)):
        if s < 0:
            raise SelectionError(f"axis {axis}: start {s} is negative")
        if c < 1:
            raise SelectionError(f"axis {axis}: count {c} is not positive")
        if s + c > n:
            raise SelectionError(f"axis {axis}: start {s} + count {c} exceeds extent {n}")


def intersect_selections(a: Selection, b: Selection) -> Selection | None:
    """Intersection of two same-rank selections, or None when disjoint."""
    start = []
    count = []
    for (as_, ac), (bs, bc) in zip(zip(a.start, a.count), zip(b.start, b.count)):
        lo = max(as_, bs)
        hi = min(as_ + ac, bs + bc)
        if hi <= lo:
            return None
        start.append(lo)
        count.append(hi - lo)
    return Selection(tuple(start), tuple(count))


# ---------------------------------------------------------------------------
# checksums

_PURE_TABLE = None


def _pure_crc32c(data: bytes, value: int = 0) -> int:
    # Table-driven fallback; the C extension is ~50x faster.
    global _PURE_TABLE
    if _PURE_TABLE is None:
        tbl = []
        for i in range(256):
            c = i
            for _ in range(8):
                c = (0x82F63B78 ^ (c >> 1)) if (c & 1) else (c >> 1)
            tbl.append(c)
        _PURE_TABLE = tbl
    crc = value ^ 0xFFFFFFFF
    tbl = _PURE_TABLE
    for byte in data:
        crc = tbl[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


def crc32c(data, value: int = 0) -> int:
    """CRC32C (Castagnoli 0x1EDC6F41, reflected, init/final-xor 0xFFFFFFFF)."""
    if _crc32c_native is not None:
        return _crc32c_native(data, value)
    return _pure_crc32c(bytes(data), value)


# ---------------------------------------------------------------------------
# block records and step indices

@dataclass(frozen=True)
class BlockRecord:
    """Index entry locating one rank's block of one variable at one step."""
    var: str
    step: int
    writer_rank: int
    selection: Selection
    subfile_id: int
    offset: int
    stored_nbytes: int
    raw_nbytes: int
    codec: CodecSpec
    checksum_raw: int
    stat_min: float
    stat_max: float

    def __post_init__(self):
        if self.codec.codec == "none" and self.stored_nbytes != self.raw_nbytes:
            raise ValueError("codec none requires stored_nbytes == raw_nbytes")
        if self.stat_min > self.stat_max:
            raise ValueError("stat_min must be <= stat_max")


@dataclass(frozen=True)
class StepIndex:
    """Per-step collection of block records; the container's metadata unit
    and the staging protocol's announcement payload."""
    step: int
    blocks: tuple[BlockRecord, ...]
    complete: bool = False

    def blocks_for(self, var: str) -> list[BlockRecord]:
        return [b for b in self.blocks if b.var == var]


def index_merge(partials: Iterable[StepIndex], world_size: int) -> StepIndex:
    """Union of fragment indices for one step.

    Blocks are sorted by (var, writer_rank); the result is complete iff every
    rank in ``range(world_size)`` contributed at least one block.
    """
    partials = list(partials)
    if not partials:
        raise ValueError("index_merge needs at least one fragment")
    step = partials[0].step
    for p in partials:
        if p.step != step:
            raise ValueError(f"fragments span steps {step} and {p.step}")
    blocks: dict[tuple[str, int], BlockRecord] = {}
    for p in partials:
        for b in p.blocks:
            key = (b.var, b.writer_rank)
            if key in blocks:
                raise DuplicateBlock(f"duplicate block for var {b.var!r} rank {b.writer_rank}")
            blocks[key] = b
    ordered = tuple(blocks[k] for k in sorted(blocks))
    contributed = {b.writer_rank for b in ordered}
    complete = contributed >= set(range(world_size))
    return StepIndex(step=step, blocks=ordered, complete=complete)


# ---------------------------------------------------------------------------
# index line format (JSON Lines, fixed key order, no extra whitespace)

def _block_to_obj(b: BlockRecord) -> dict:
    return {
        "var": b.var,
        "step": b.step,
        "rank": b.writer_rank,
        "start": list(b.selection.start),
        "count": list(b.selection.count),
        "subfile": b.subfile_id,
        "offset": b.offset,
        "stored": b.stored_nbytes,
        "raw": b.raw_nbytes,
        "codec": b.codec.codec,
        "level": b.codec.level,
        "shuffle": b.codec.shuffle,
        "crc32c": f"{b.checksum_raw:08x}",
        "min": b.stat_min,
        "max": b.stat_max,
    }


_BLOCK_KEYS = ("var", "step", "rank", "start", "count", "subfile", "offset",
               "stored", "raw", "codec", "level", "shuffle", "crc32c", "min", "max")


def _block_from_obj(obj: dict, pos: int) -> BlockRecord:
    missing = [k for k in _BLOCK_KEYS if k not in obj]
    if missing:
        raise ParseError(f"block missing keys {missing}", pos)
    try:
        return BlockRecord(
            var=obj["var"],
            step=int(obj["step"]),
            writer_rank=int(obj["rank"]),
            selection=Selection(tuple(obj["start"]), tuple(obj["count"])),
            subfile_id=int(obj["subfile"]),
            offset=int(obj["offset"]),
            stored_nbytes=int(obj["stored"]),
            raw_nbytes=int(obj["raw"]),
            codec=CodecSpec(obj["codec"], int(obj["level"]), bool(obj["shuffle"])),
            checksum_raw=int(obj["crc32c"], 16),
            stat_min=float(obj["min"]),
            stat_max=float(obj["max"]),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad block field: {exc}", pos) from exc


def index_serialize(idx: StepIndex) -> str:
    """One StepIndex as one JSON line (no trailing newline).

    Deterministic: fixed key order, no extra whitespace."""
    obj = {
        "step": idx.step,
        "complete": idx.complete,
        "blocks": [_block_to_obj(b) for b in idx.blocks],
    }
    return json.dumps(obj, separators=(",", ":"))


def index_parse(line: str) -> StepIndex:
    """Inverse of :func:`index_serialize`; raises ParseError with the byte
    position on malformed input."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad index line: {exc.msg}", exc.pos) from exc
    if not isinstance(obj, dict):
        raise ParseError("index line is not a JSON object", 0)
    for key in ("step", "complete", "blocks"):
        if key not in obj:
            raise ParseError(f"index line missing key {key!r}", 0)
    blocks = tuple(_block_from_obj(b, 0) for b in obj["blocks"])
    return StepIndex(step=int(obj["step"]), blocks=blocks, complete=bool(obj["complete"]))


# ---------------------------------------------------------------------------
# engine parameters

MODES = ("serial_funnel", "file_per_process", "shared_two_phase",
         "aggregated_subfile", "staging")


@dataclass(frozen=True)
class EngineParams:
    """Runtime configuration shared by every engine mode."""
    mode: str = "aggregated_subfile"
    aggregation_ratio: int = 0          # 0 = one aggregator per node
    pfs_dir: str = ""
    bb_dir: str | None = None
    drain: bool = False
    codec: CodecSpec = field(default_factory=CodecSpec.none)
    queue_limit: int = 1
    queue_full_policy: str = "block"
    dataplane: str = "tcp"
    pfs_bw_mbps: float | None = None
    comm_latency_us: float | None = None

    def __post_init__(self):
        from .errors import ConfigError
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.drain and not self.bb_dir:
            raise ConfigError("drain=true requires bb_dir")
        if self.mode == "shared_two_phase" and self.codec.codec != "none":
            raise ConfigError("shared_two_phase does not allow data compression")
        if self.queue_limit < 0:
            raise ConfigError("queue_limit must be >= 0")
        if self.queue_full_policy not in ("block", "discard"):
            raise ConfigError(f"unknown queue_full_policy {self.queue_full_policy!r}")
        if self.dataplane not in ("tcp", "shm"):
            raise ConfigError(f"unknown dataplane {self.dataplane!r}")
        if self.aggregation_ratio < 0:
            raise ConfigError("aggregation_ratio must be positive (or 0 for per-node default)")

    def with_mode(self, mode: str) -> "EngineParams":
        return replace(self, mode=mode)


# ---------------------------------------------------------------------------
# block assembly (shared by the container reader, staging reader, stitcher)

def assemble_selection(vdef: VariableDef, sel: Selection,
                       blocks: Sequence[BlockRecord], fetch_raw) -> bytes:
    """Copy the parts of ``blocks`` intersecting ``sel`` into a caller buffer
    laid out canonically (row-major sub-array of shape ``sel.count``).

    ``fetch_raw(block)`` must return the block's raw little-endian bytes.
    Raises CoverageError when some requested element is not covered.
    """
    from .errors import CoverageError

    validate_selection(sel, vdef)
    np_dtype = vdef.dtype.np_dtype
    out = np.zeros(sel.count, dtype=np_dtype)
    covered = np.zeros(sel.count, dtype=bool)
    for b in blocks:
        inter = intersect_selections(sel, b.selection)
        if inter is None:
            continue
        raw = fetch_raw(b)
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(b.selection.count)
        src = tuple(slice(i - s, i - s + c)
                    for i, s, c in zip(inter.start, b.selection.start, inter.count))
        dst = tuple(slice(i - s, i - s + c)
                    for i, s, c in zip(inter.start, sel.start, inter.count))
        out[dst] = arr[src]
        covered[dst] = True
    if not covered.all():
        first = np.unravel_index(int(np.argmin(covered)), covered.shape)
        point = tuple(int(p) + s for p, s in zip(first, sel.start))
        raise CoverageError(f"element {point} of {vdef.name!r} not covered by any block")
    return out.tobytes()
