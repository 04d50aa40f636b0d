import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miniio.codecs import (
    CodecSpec,
    StoredPayload,
    decode,
    encode,
    shuffle_bytes,
    unshuffle_bytes,
)
from miniio.errors import CodecError, FormatError, ShapeError

ALL_SPECS = [
    CodecSpec.none(),
    CodecSpec("lz4", 1, False), CodecSpec("lz4", 1, True),
    CodecSpec("lz4", 9, True),
    CodecSpec("zstd", 3, False), CodecSpec("zstd", 3, True),
    CodecSpec("zstd", 8, True),
    CodecSpec("zlib", 6, False), CodecSpec("zlib", 6, True),
]


def test_zeros_compress_tiny():
    p = encode(bytes(4096), 4, CodecSpec("zstd", 3, False))
    assert len(p.body) < 64


def test_codec_none_identity():
    raw = bytes(random.Random(1).randbytes(1000))
    p = encode(raw, 4, CodecSpec.none())
    assert p.body == raw
    assert p.codec == "none"
    assert decode(p) == raw


@pytest.mark.parametrize("spec", ALL_SPECS, ids=str)
def test_round_trip_random_strings(spec):
    rng = random.Random(42)
    for _ in range(10):
        n = rng.randrange(1, 5000) * 4
        raw = rng.randbytes(n)
        p = encode(raw, 4, spec)
        assert decode(p) == raw


@pytest.mark.parametrize("spec", ALL_SPECS, ids=str)
def test_round_trip_smooth_data(spec):
    x = np.linspace(0, 8 * np.pi, 4096)
    raw = np.sin(x).astype("<f4").tobytes()
    p = encode(raw, 4, spec)
    assert decode(p) == raw
    assert p.raw_nbytes == len(raw)


def test_truncated_body_rejected():
    raw = np.arange(4096, dtype="<f4").tobytes()
    for spec in (CodecSpec("zstd", 3, True), CodecSpec("zlib", 6, False),
                 CodecSpec("lz4", 1, False), CodecSpec.none()):
        p = encode(raw, 4, spec)
        bad = StoredPayload(p.raw_nbytes, p.codec, p.level, p.shuffle,
                            p.elem_size, p.body[:-1])
        with pytest.raises((CodecError, FormatError)):
            decode(bad)


def test_fallback_on_incompressible_data():
    raw = random.Random(7).randbytes(64 * 1024)
    for spec in ALL_SPECS[1:]:
        p = encode(raw, 4, spec)
        # stored body never exceeds the raw bytes (header records the fallback)
        assert len(p.body) <= len(raw)
        if len(p.body) == len(raw):
            assert p.codec == "none"
        assert decode(p) == raw


def test_shuffle_by_definition():
    assert shuffle_bytes(bytes([0xA0, 0xA1, 0xB0, 0xB1]), 2) == bytes([0xA0, 0xB0, 0xA1, 0xB1])


def test_shuffle_elem_size_one_is_identity():
    raw = bytes(range(16))
    assert shuffle_bytes(raw, 1) == raw
    assert unshuffle_bytes(raw, 1) == raw


@pytest.mark.parametrize("elem_size", [1, 4, 8])
def test_unshuffle_inverts_shuffle(elem_size):
    raw = random.Random(3).randbytes(elem_size * 257)
    assert unshuffle_bytes(shuffle_bytes(raw, elem_size), elem_size) == raw


def test_double_shuffle_is_not_identity():
    raw = bytes(range(32))
    twice = shuffle_bytes(shuffle_bytes(raw, 4), 4)
    assert twice != raw


def test_shuffle_rejects_indivisible_length():
    with pytest.raises(ShapeError):
        shuffle_bytes(bytes(10), 4)
    with pytest.raises(ShapeError):
        encode(bytes(10), 4, CodecSpec("zstd", 3, True))


def test_codec_none_normalizes_spec():
    spec = CodecSpec("none", 9, True)
    assert spec.level == 0 and spec.shuffle is False


def test_level_ranges_enforced():
    with pytest.raises(ValueError):
        CodecSpec("zstd", 99)
    with pytest.raises(ValueError):
        CodecSpec("lz4", 0)
    with pytest.raises(ValueError):
        CodecSpec("blosclz")


def test_header_round_trip():
    p = encode(bytes(64), 8, CodecSpec("zlib", 6, True))
    q = StoredPayload.from_header(dict(p.header_obj()), p.body)
    assert q == p


@given(st.binary(min_size=0, max_size=2048).map(lambda b: b + bytes(-len(b) % 8)))
@settings(max_examples=60, deadline=None)
def test_lossless_property_all_specs(raw):
    for spec in ALL_SPECS:
        before = bytes(raw)
        p = encode(raw, 8, spec)
        assert decode(p) == raw
        assert raw == before  # inputs never mutated
        # incompressible inputs never blow up past raw size
        assert len(p.body) <= max(len(raw), 1)
