"""Bit-exact artifact verification against the workload oracle.

Recomputes the expected field for every rank patch of every step and compares
against the artifact byte for byte; containers, canonical flat files, and
file-per-process part directories are all accepted.
"""
from __future__ import annotations

import os

import numpy as np

from ..cff import CffReader
from ..container import reader_open
from ..errors import MiniIOError
from .fpp import PartReader, part_paths
from .workload import WorkloadSpec, generate_patch, patch_selection


def _expected_full(spec: WorkloadSpec, var_index: int, step: int) -> np.ndarray:
    """Canonical assembly oracle: brute-force the global array from the
    per-rank patches."""
    from ..core import dtype_for
    canvas = np.zeros(spec.global_shape, dtype=dtype_for(spec.dtype).np_dtype)
    for rank in range(spec.ranks):
        sel = patch_selection(spec, rank)
        sl = tuple(slice(s, s + c) for s, c in zip(sel.start, sel.count))
        canvas[sl] = generate_patch(spec, var_index, step, sel)
    return canvas


def _first_mismatch(expected: bytes, got: bytes, spec: WorkloadSpec,
                    var: str, step: int) -> str:
    n = min(len(expected), len(got))
    exp = np.frombuffer(expected[:n], dtype=np.uint8)
    act = np.frombuffer(got[:n], dtype=np.uint8)
    diff = np.nonzero(exp != act)[0]
    byte = int(diff[0]) if diff.size else n
    from ..core import dtype_for
    elem = byte // dtype_for(spec.dtype).elem_size
    coords = np.unravel_index(elem, spec.global_shape)
    return (f"var {var!r} step {step}: first mismatch at element "
            f"{tuple(int(c) for c in coords)} (byte {byte})")


def verify(artifact: str, spec: WorkloadSpec) -> dict:
    """-> {"ok": bool, "error": str|None, "kind": ...}.  Never raises for a
    data mismatch, only for unreadable artifacts."""
    try:
        if os.path.isdir(artifact):
            if os.path.exists(os.path.join(artifact, "info.json")):
                return _verify_container(artifact, spec)
            if part_paths(artifact):
                return _verify_parts(artifact, spec)
            raise MiniIOError(f"{artifact} is neither a container nor parts dir")
        return _verify_flat(artifact, spec)
    except MiniIOError as exc:
        return {"ok": False, "kind": "unreadable", "error": str(exc)}


def _verify_container(path: str, spec: WorkloadSpec) -> dict:
    with reader_open(path) as reader:
        steps = list(reader.steps())
        if steps != list(range(spec.steps)):
            return {"ok": False, "kind": "container",
                    "error": f"expected steps {list(range(spec.steps))}, found {steps}"}
        for step in steps:
            for vi, name in enumerate(spec.var_names):
                for rank in range(spec.ranks):
                    sel = patch_selection(spec, rank)
                    expected = generate_patch(spec, vi, step, sel).tobytes()
                    got = reader.read(name, step, sel)
                    if got != expected:
                        return {"ok": False, "kind": "container",
                                "error": _first_mismatch(expected, got, spec,
                                                         name, step)}
    return {"ok": True, "kind": "container", "error": None}


def _verify_flat(path: str, spec: WorkloadSpec) -> dict:
    with CffReader(path) as reader:
        if reader.steps != spec.steps:
            return {"ok": False, "kind": "flat",
                    "error": f"flat file has {reader.steps} steps, expected {spec.steps}"}
        if [v.name for v in reader.variables] != spec.var_names:
            return {"ok": False, "kind": "flat", "error": "variable set differs"}
        for step in range(spec.steps):
            for vi, name in enumerate(spec.var_names):
                expected = _expected_full(spec, vi, step).tobytes()
                got = reader.read_var(step, vi)
                if got != expected:
                    return {"ok": False, "kind": "flat",
                            "error": _first_mismatch(expected, got, spec, name, step)}
    return {"ok": True, "kind": "flat", "error": None}


def _verify_parts(path: str, spec: WorkloadSpec) -> dict:
    for part_path in part_paths(path):
        part = PartReader(part_path)
        try:
            if sorted(part.steps) != list(range(spec.steps)):
                return {"ok": False, "kind": "parts",
                        "error": f"{part_path} covers steps {sorted(part.steps)}"}
            for step, blocks in sorted(part.steps.items()):
                by_var = {b.var: b for b in blocks}
                for vi, name in enumerate(spec.var_names):
                    block = by_var.get(name)
                    if block is None:
                        return {"ok": False, "kind": "parts",
                                "error": f"{part_path} step {step} missing {name!r}"}
                    expected = generate_patch(spec, vi, step,
                                              block.selection).tobytes()
                    got = part.fetch_raw(block)
                    if got != expected:
                        return {"ok": False, "kind": "parts",
                                "error": _first_mismatch(expected, got, spec,
                                                         name, step)}
        finally:
            part.close()
    return {"ok": True, "kind": "parts", "error": None}
