import math

import numpy as np
import pytest

from miniio.codecs import CodecSpec, encode
from miniio.core import Selection
from miniio.errors import ConfigError
from miniio.harness.workload import (
    VALUE_QUANTUM,
    WorkloadSpec,
    axis_split,
    decompose,
    field_value,
    generate_patch,
    patch_selection,
)

SMALL = WorkloadSpec(global_shape=(64, 64, 8), nvars=2, steps=2, ranks=4,
                     ranks_per_node=2, seed=42)


def test_determinism_same_bits():
    a = generate_patch(SMALL, 0, 1, patch_selection(SMALL, 2))
    b = generate_patch(SMALL, 0, 1, patch_selection(SMALL, 2))
    assert a.tobytes() == b.tobytes()


def test_steps_and_vars_differ():
    sel = patch_selection(SMALL, 0)
    s0 = generate_patch(SMALL, 0, 0, sel)
    s1 = generate_patch(SMALL, 0, 1, sel)
    v1 = generate_patch(SMALL, 1, 0, sel)
    assert s0.tobytes() != s1.tobytes()
    assert s0.tobytes() != v1.tobytes()


def test_patches_match_full_grid_evaluation():
    nx, ny, nz = SMALL.global_shape
    full = generate_patch(SMALL, 0, 1, Selection((0, 0, 0), (nx, ny, nz)))
    for rank in range(SMALL.ranks):
        sel = patch_selection(SMALL, rank)
        patch = generate_patch(SMALL, 0, 1, sel)
        sl = tuple(slice(s, s + c) for s, c in zip(sel.start, sel.count))
        assert np.array_equal(full[sl], patch), f"rank {rank} patch differs"


def test_field_value_matches_patch():
    sel = patch_selection(SMALL, 1)
    patch = generate_patch(SMALL, 0, 0, sel)
    x, y, z = sel.start[0] + 3, sel.start[1] + 5, 2
    assert field_value(SMALL, 0, x, y, z, 0) == patch[3, 5, 2]


def test_zero_noise_matches_closed_form_within_quantum():
    spec = WorkloadSpec(global_shape=(16, 12, 6), nvars=1, steps=1, ranks=1,
                        ranks_per_node=1, seed=7, noise_amplitude=0.0)
    from miniio.harness.workload import _AMPLITUDES, _wave_params
    k1, k2, kz, ph, om = _wave_params(spec.seed, 0)
    a0, a1, a2 = _AMPLITUDES
    nx, ny, nz = spec.global_shape
    got = generate_patch(spec, 0, 3, Selection((0, 0, 0), spec.global_shape))
    for x, y, z in [(0, 0, 0), (5, 3, 2), (15, 11, 5), (8, 0, 4)]:
        closed = (a0 * math.sin(2 * math.pi * (k1[0] * x / nx + k1[1] * y / ny) + ph[0] + om[0] * 3)
                  + a1 * math.sin(2 * math.pi * (k2[0] * x / nx + k2[1] * y / ny) + ph[1] + om[1] * 3)
                  + a2 * math.sin(2 * math.pi * kz * z / nz + ph[2] + om[2] * 3))
        assert abs(float(got[x, y, z]) - closed) <= VALUE_QUANTUM / 2 + 1e-12


def test_noise_amplitude_bound():
    base = WorkloadSpec(global_shape=(32, 32, 4), nvars=1, steps=1, ranks=1,
                        ranks_per_node=1, seed=3, noise_amplitude=0.0)
    noisy = WorkloadSpec(global_shape=(32, 32, 4), nvars=1, steps=1, ranks=1,
                         ranks_per_node=1, seed=3, noise_amplitude=1e-3)
    sel = Selection((0, 0, 0), base.global_shape)
    a = generate_patch(base, 0, 0, sel).astype(np.float64)
    b = generate_patch(noisy, 0, 0, sel).astype(np.float64)
    # noise amplitude is 1e-3 of the signal amplitude (2.4), plus quantization
    assert np.max(np.abs(a - b)) <= 1e-3 * 2.4 + VALUE_QUANTUM


def test_compression_ratio_over_2_with_zstd_shuffle():
    spec = WorkloadSpec(global_shape=(64, 64, 8), nvars=1, steps=1, ranks=1,
                        ranks_per_node=1, seed=11)
    raw = generate_patch(spec, 0, 0, Selection((0, 0, 0), spec.global_shape)).tobytes()
    p = encode(raw, 4, CodecSpec("zstd", 3, True))
    assert len(raw) / len(p.body) > 2.0


@pytest.mark.parametrize("dtype", ["f64", "i32", "i64", "u8"])
def test_other_dtypes_generate(dtype):
    spec = WorkloadSpec(global_shape=(16, 16, 4), nvars=1, steps=1, ranks=1,
                        ranks_per_node=1, dtype=dtype)
    arr = generate_patch(spec, 0, 0, Selection((0, 0, 0), spec.global_shape))
    assert arr.shape == (16, 16, 4)
    assert arr.dtype.itemsize == {"f64": 8, "i32": 4, "i64": 8, "u8": 1}[dtype]
    again = generate_patch(spec, 0, 0, Selection((0, 0, 0), spec.global_shape))
    assert arr.tobytes() == again.tobytes()


# ---------------------------------------------------------------------------
# decomposition

def test_axis_split_remainder_to_low_ranks():
    assert axis_split(10, 4) == [(0, 3), (3, 3), (6, 2), (8, 2)]
    assert axis_split(8, 4) == [(0, 2), (2, 2), (4, 2), (6, 2)]


def test_decompose_prefers_square_patches():
    assert decompose(4, 64, 64) == (2, 2)
    px, py = decompose(16, 128, 96)
    assert px * py == 16


def test_patches_tile_grid_exactly():
    spec = WorkloadSpec(global_shape=(19, 13, 3), nvars=1, steps=1, ranks=6,
                        ranks_per_node=3)
    seen = np.zeros(spec.global_shape, dtype=int)
    for rank in range(spec.ranks):
        sel = patch_selection(spec, rank)
        sl = tuple(slice(s, s + c) for s, c in zip(sel.start, sel.count))
        seen[sl] += 1
    assert (seen == 1).all()


def test_workload_validation():
    with pytest.raises(ConfigError):
        WorkloadSpec(ranks=5, ranks_per_node=2)
    with pytest.raises(ConfigError):
        WorkloadSpec(global_shape=(4, 4), nvars=1)  # type: ignore[arg-type]
    with pytest.raises(ConfigError):
        WorkloadSpec(dtype="f16")


def test_config_round_trip():
    spec = WorkloadSpec(global_shape=(32, 24, 8), nvars=3, steps=5, ranks=4,
                        ranks_per_node=2, seed=9, compute_ms=50.0)
    assert WorkloadSpec.from_config(spec.to_config()) == spec


def test_step_nbytes():
    spec = WorkloadSpec(global_shape=(10, 10, 10), nvars=2, dtype="f32",
                        ranks=1, ranks_per_node=1)
    assert spec.step_nbytes == 2 * 1000 * 4
