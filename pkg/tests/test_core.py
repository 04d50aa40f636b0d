import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miniio.codecs import CodecSpec
from miniio.core import (
    BlockRecord,
    DTYPES,
    EngineParams,
    Selection,
    StepIndex,
    VariableDef,
    canonical_offset,
    crc32c,
    index_merge,
    index_parse,
    index_serialize,
    validate_selection,
)
from miniio.errors import ConfigError, DuplicateBlock, ParseError, SelectionError


# ---------------------------------------------------------------------------
# crc32c: reference bit-by-bit oracle, computed before trusting the fast path

def crc32c_bitwise(data: bytes) -> int:
    """Independent oracle: reflected CRC with polynomial 0x1EDC6F41,
    init/final-xor 0xFFFFFFFF, processed one bit at a time."""
    poly = 0x82F63B78  # reflected 0x1EDC6F41
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (poly ^ (crc >> 1)) if (crc & 1) else (crc >> 1)
    return crc ^ 0xFFFFFFFF


def test_crc32c_check_value():
    assert crc32c_bitwise(b"123456789") == 0xE3069283
    assert crc32c(b"123456789") == 0xE3069283


def test_crc32c_empty():
    assert crc32c(b"") == 0


def test_crc32c_streaming_matches_one_shot():
    data = bytes(range(256)) * 7
    part = crc32c(data[:100])
    assert crc32c(data[100:], part) == crc32c(data)


@given(st.binary(max_size=512))
@settings(max_examples=200)
def test_crc32c_matches_bitwise_oracle(data):
    assert crc32c(data) == crc32c_bitwise(data)


@given(st.binary(min_size=1, max_size=64), st.data())
def test_crc32c_bit_flip_changes_value(data, draw):
    i = draw.draw(st.integers(0, len(data) - 1))
    bit = draw.draw(st.integers(0, 7))
    flipped = bytearray(data)
    flipped[i] ^= 1 << bit
    assert crc32c(bytes(flipped)) != crc32c(data)
    assert crc32c(data) == crc32c(data)


# ---------------------------------------------------------------------------
# canonical layout

def test_canonical_offset_examples():
    assert canonical_offset((1, 2, 0), (4, 3, 2)) == 10
    assert canonical_offset((0, 0, 0), (4, 3, 2)) == 0
    assert canonical_offset((0, 0), (9, 5)) == 0
    assert canonical_offset((3, 2, 1), (4, 3, 2)) == 23


def test_canonical_offset_out_of_range():
    with pytest.raises(IndexError):
        canonical_offset((4, 0, 0), (4, 3, 2))
    with pytest.raises(IndexError):
        canonical_offset((0, 0), (4, 3, 2))


@pytest.mark.parametrize("shape", [(1,), (5,), (2, 3), (5, 5, 5), (3, 4, 5), (2, 2, 2, 3)])
def test_canonical_offset_is_bijection(shape):
    seen = set()
    for point in itertools.product(*(range(n) for n in shape)):
        off = canonical_offset(point, shape)
        assert 0 <= off < math.prod(shape)
        seen.add(off)
    assert len(seen) == math.prod(shape)


# ---------------------------------------------------------------------------
# selections

V = VariableDef("T", DTYPES["f32"], (4, 3))


def test_validate_selection_full():
    validate_selection(Selection((0, 0), (4, 3)), V)


def test_validate_selection_overflow_names_axis():
    with pytest.raises(SelectionError, match="axis 0"):
        validate_selection(Selection((2, 0), (3, 3)), V)


def test_validate_selection_rank_mismatch():
    with pytest.raises(SelectionError, match="rank"):
        validate_selection(Selection((0,), (4,)), V)


# ---------------------------------------------------------------------------
# block records / merge

def mk_block(var="T", rank=0, step=0, start=(0, 0), count=(2, 3), subfile=0,
             offset=0):
    nbytes = math.prod(count) * 4
    return BlockRecord(
        var=var, step=step, writer_rank=rank,
        selection=Selection(start, count), subfile_id=subfile, offset=offset,
        stored_nbytes=nbytes, raw_nbytes=nbytes, codec=CodecSpec.none(),
        checksum_raw=0xDEADBEEF, stat_min=-1.0, stat_max=1.0)


def test_index_merge_complete():
    a = StepIndex(0, (mk_block(rank=0), mk_block("U", rank=0)))
    b = StepIndex(0, (mk_block(rank=1, start=(2, 0)), mk_block("U", rank=1, start=(2, 0))))
    merged = index_merge([a, b], world_size=2)
    assert merged.complete
    assert [blk.var for blk in merged.blocks] == ["T", "T", "U", "U"]
    assert [blk.writer_rank for blk in merged.blocks] == [0, 1, 0, 1]


def test_index_merge_incomplete_without_all_ranks():
    a = StepIndex(0, (mk_block(rank=0),))
    merged = index_merge([a], world_size=2)
    assert not merged.complete


def test_index_merge_duplicate_block():
    a = StepIndex(0, (mk_block(rank=0),))
    b = StepIndex(0, (mk_block(rank=0, offset=99),))
    with pytest.raises(DuplicateBlock):
        index_merge([a, b], world_size=2)


def test_index_merge_mixed_steps_rejected():
    with pytest.raises(ValueError):
        index_merge([StepIndex(0, (mk_block(),)), StepIndex(1, (mk_block(step=1),))],
                    world_size=1)


@given(st.permutations(range(4)))
def test_index_merge_order_insensitive(perm):
    frags = [StepIndex(2, (mk_block(rank=r, step=2, start=(r, 0), count=(1, 3),
                                    offset=r * 12),)) for r in range(4)]
    base = index_merge(frags, world_size=4)
    shuffled = index_merge([frags[i] for i in perm], world_size=4)
    assert base == shuffled


# ---------------------------------------------------------------------------
# index line round trip

def sample_index():
    blocks = (
        mk_block(rank=0, subfile=0, offset=0),
        mk_block(rank=1, start=(2, 0), subfile=1, offset=24),
        BlockRecord("W", 3, 2, Selection((0, 0), (4, 3)), 0, 48, 20, 48,
                    CodecSpec("zstd", 3, True), 0x0000ABCD, 0.25, 0.75),
    )
    return StepIndex(3, tuple(b if b.step == 3 else
                              BlockRecord(**{**b.__dict__, "step": 3})
                              for b in blocks), complete=True)


def test_index_round_trip():
    idx = sample_index()
    assert index_parse(index_serialize(idx)) == idx


def test_index_serialize_deterministic():
    idx = sample_index()
    assert index_serialize(idx) == index_serialize(idx)


def test_index_serialize_layout():
    line = index_serialize(StepIndex(0, (mk_block(),), complete=True))
    assert line.startswith('{"step":0,"complete":true,"blocks":[{"var":"T",')
    assert " " not in line
    assert '"crc32c":"deadbeef"' in line


def test_index_parse_truncated():
    line = index_serialize(sample_index())
    with pytest.raises(ParseError):
        index_parse(line[:len(line) // 2])


def test_index_parse_reports_position():
    try:
        index_parse('{"step":0,"complete":true,"blocks":[}')
    except ParseError as exc:
        assert exc.pos > 0
    else:
        pytest.fail("expected ParseError")


def test_index_parse_rejects_missing_keys():
    with pytest.raises(ParseError):
        index_parse('{"step":0,"blocks":[]}')


# ---------------------------------------------------------------------------
# dtypes / params

def test_dtype_element_sizes():
    sizes = {"f32": 4, "f64": 8, "i32": 4, "i64": 8, "u8": 1}
    for tag, size in sizes.items():
        assert DTYPES[tag].elem_size == size
        assert DTYPES[tag].np_dtype.itemsize == size


def test_variable_def_rejects_bad_shapes():
    with pytest.raises(ValueError):
        VariableDef("T", DTYPES["f32"], ())
    with pytest.raises(ValueError):
        VariableDef("T", DTYPES["f32"], (4, 0))
    with pytest.raises(ValueError):
        VariableDef("", DTYPES["f32"], (4,))


def test_engine_params_drain_requires_bb():
    with pytest.raises(ConfigError):
        EngineParams(mode="aggregated_subfile", drain=True)


def test_engine_params_two_phase_forbids_codec():
    with pytest.raises(ConfigError):
        EngineParams(mode="shared_two_phase", codec=CodecSpec("zstd", 3, True))


def test_engine_params_unknown_mode():
    with pytest.raises(ConfigError):
        EngineParams(mode="quilt_server")
