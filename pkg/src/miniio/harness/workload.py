"""Deterministic synthetic grid workload.

Every variable is a smooth scalar field over a 3D grid: two low-frequency
horizontal waves plus one vertical profile wave, with per-cell noise of
amplitude 1e-3 of the signal, quantized to a fixed power-of-two value grid
(2^-11) the way real model output carries a limited number of significant
digits.  Values are a pure function of (variable, x, y, z, step, seed), so
any rank can produce its patch independently and any reader can recompute
the expected contents bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..core import DTYPES, Dtype, Selection, VariableDef, dtype_for
from ..errors import ConfigError

__all__ = ["WorkloadSpec", "field_value", "generate_patch", "patch_selection",
           "decompose", "axis_split", "VALUE_QUANTUM"]

VALUE_QUANTUM = 2.0 ** -11
_AMPLITUDES = (1.0, 0.6, 0.8)
_SIGNAL_AMPLITUDE = sum(_AMPLITUDES)

_DEFAULT_NAMES = ("T", "U", "V", "W", "P", "QVAPOR", "TSK", "PSFC")


@dataclass(frozen=True)
class WorkloadSpec:
    """A run's synthetic workload: grid, variables, cadence, topology."""
    global_shape: tuple[int, int, int] = (256, 192, 32)
    nvars: int = 8
    dtype: str = "f32"
    steps: int = 4
    compute_ms: float = 200.0
    ranks: int = 8
    ranks_per_node: int = 4
    seed: int = 1
    noise_amplitude: float = 1e-3

    def __post_init__(self):
        if len(self.global_shape) != 3 or any(d < 1 for d in self.global_shape):
            raise ConfigError(f"global_shape must be 3 positive extents, got {self.global_shape}")
        object.__setattr__(self, "global_shape", tuple(int(d) for d in self.global_shape))
        if self.nvars < 1:
            raise ConfigError("nvars must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.ranks < 1:
            raise ConfigError("ranks must be >= 1")
        if self.ranks_per_node < 1 or self.ranks % self.ranks_per_node:
            raise ConfigError(
                f"ranks {self.ranks} must be divisible by ranks_per_node {self.ranks_per_node}")
        decompose(self.ranks, self.global_shape[0], self.global_shape[1])

    @property
    def var_names(self) -> list[str]:
        names = list(_DEFAULT_NAMES[:self.nvars])
        names += [f"V{i:02d}" for i in range(len(names), self.nvars)]
        return names

    def variable_defs(self) -> list[VariableDef]:
        dt = dtype_for(self.dtype)
        return [VariableDef(name, dt, self.global_shape) for name in self.var_names]

    @property
    def step_nbytes(self) -> int:
        return self.nvars * math.prod(self.global_shape) * dtype_for(self.dtype).elem_size

    def to_config(self) -> dict:
        return {
            "grid": list(self.global_shape), "nvars": self.nvars,
            "dtype": self.dtype, "steps": self.steps,
            "compute_ms": self.compute_ms, "ranks": self.ranks,
            "ranks_per_node": self.ranks_per_node, "seed": self.seed,
            "noise_amplitude": self.noise_amplitude,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "WorkloadSpec":
        kwargs = {}
        if "grid" in cfg:
            kwargs["global_shape"] = tuple(cfg["grid"])
        for key in ("nvars", "dtype", "steps", "compute_ms", "ranks",
                    "ranks_per_node", "seed", "noise_amplitude"):
            if key in cfg and cfg[key] is not None:
                kwargs[key] = cfg[key]
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# domain decomposition: 2D in (x, y), full z per rank, remainder to low ranks

def axis_split(extent: int, parts: int) -> list[tuple[int, int]]:
    """(start, count) pairs splitting ``extent`` near-equally; the first
    extent % parts patches take the extra element."""
    base, rem = divmod(extent, parts)
    out = []
    pos = 0
    for i in range(parts):
        count = base + (1 if i < rem else 0)
        out.append((pos, count))
        pos += count
    return out


def decompose(ranks: int, nx: int, ny: int) -> tuple[int, int]:
    """Choose the px x py process grid (px * py == ranks) whose patches are
    closest to square.  Deterministic."""
    best = None
    for px in range(1, ranks + 1):
        if ranks % px:
            continue
        py = ranks // px
        if px > nx or py > ny:
            continue
        w, h = nx / px, ny / py
        score = abs(math.log(w / h))
        if best is None or score < best[0]:
            best = (score, px, py)
    if best is None:
        raise ConfigError(f"cannot decompose {nx}x{ny} grid over {ranks} ranks")
    return best[1], best[2]


def patch_selection(spec: WorkloadSpec, rank: int) -> Selection:
    """Rank's hyper-rectangular patch: 2D split in (x, y), full z."""
    nx, ny, nz = spec.global_shape
    px, py = decompose(spec.ranks, nx, ny)
    ix, iy = divmod(rank, py)
    xs, xc = axis_split(nx, px)[ix]
    ys, yc = axis_split(ny, py)[iy]
    return Selection((xs, ys, 0), (xc, yc, nz))


# ---------------------------------------------------------------------------
# field generation

def _wave_params(seed: int, var_index: int):
    rng = np.random.default_rng([np.uint32(seed & 0xFFFFFFFF), np.uint32(var_index)])
    k1 = rng.uniform(0.4, 1.4, 2)
    k2 = rng.uniform(0.4, 1.4, 2)
    kz = int(rng.integers(1, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, 3)
    drift = rng.uniform(0.1, 0.4, 3)
    return k1, k2, kz, phases, drift


_U64 = np.uint64


def _splitmix64(x):
    z = x + _U64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def _noise_quanta(xs, ys, zs, key: int):
    """Counter-based noise: uniform integer in [-1024, 1024], a pure function
    of the cell coordinates and (seed, var, step)."""
    with np.errstate(over="ignore"):
        h = (xs.astype(_U64) * _U64(0x9E3779B1)
             ^ ys.astype(_U64) * _U64(0x85EBCA77)
             ^ zs.astype(_U64) * _U64(0xC2B2AE3D)
             ^ _U64(key & 0xFFFFFFFFFFFFFFFF))
        h = _splitmix64(h)
    return (h % _U64(2049)).astype(np.int64) - 1024


def _noise_key(seed: int, var_index: int, step: int) -> int:
    return (seed * 1315423911 + var_index * 2654435761 + step * 97531) & 0xFFFFFFFFFFFFFFFF


def generate_patch(spec: WorkloadSpec, var_index: int, step: int,
                   sel: Selection) -> np.ndarray:
    """The variable's values over ``sel`` at ``step``, in the declared dtype.

    Pure and patch-independent: any sub-selection of the global grid yields
    the same values as the corresponding slice of a full-grid evaluation.
    """
    nx, ny, nz = spec.global_shape
    (xs, ys, zs), (xc, yc, zc) = sel.start, sel.count
    k1, k2, kz, ph, om = _wave_params(spec.seed, var_index)
    a0, a1, a2 = _AMPLITUDES
    t = float(step)

    x = np.arange(xs, xs + xc, dtype=np.float64)[:, None]
    y = np.arange(ys, ys + yc, dtype=np.float64)[None, :]
    horiz = (a0 * np.sin(2.0 * np.pi * (k1[0] * x / nx + k1[1] * y / ny) + ph[0] + om[0] * t)
             + a1 * np.sin(2.0 * np.pi * (k2[0] * x / nx + k2[1] * y / ny) + ph[1] + om[1] * t))
    z = np.arange(zs, zs + zc, dtype=np.float64)
    profile = a2 * np.sin(2.0 * np.pi * kz * z / nz + ph[2] + om[2] * t)

    gx = np.arange(xs, xs + xc, dtype=np.int64)[:, None, None]
    gy = np.arange(ys, ys + yc, dtype=np.int64)[None, :, None]
    gz = np.arange(zs, zs + zc, dtype=np.int64)[None, None, :]
    quanta = _noise_quanta(gx, gy, gz, _noise_key(spec.seed, var_index, step))
    noise = quanta * (spec.noise_amplitude * _SIGNAL_AMPLITUDE / 1024.0)

    value = horiz[:, :, None] + profile[None, None, :] + noise
    value = np.round(value / VALUE_QUANTUM) * VALUE_QUANTUM
    return _to_dtype(value, dtype_for(spec.dtype))


def _to_dtype(value: np.ndarray, dt: Dtype) -> np.ndarray:
    if dt.tag in ("f32", "f64"):
        return value.astype(dt.np_dtype)
    if dt.tag in ("i32", "i64"):
        # integer fields carry the field in value-quantum units
        return np.round(value / VALUE_QUANTUM).astype(dt.np_dtype)
    # u8: map the signal range onto [0, 255]
    scaled = (value / _SIGNAL_AMPLITUDE + 1.0) * 127.5
    return np.clip(np.round(scaled), 0, 255).astype(dt.np_dtype)


def field_value(spec: WorkloadSpec, var_index: int, x: int, y: int, z: int,
                step: int):
    """Single-point evaluation (same path as generate_patch)."""
    sel = Selection((x, y, z), (1, 1, 1))
    return generate_patch(spec, var_index, step, sel)[0, 0, 0]
