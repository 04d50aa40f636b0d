"""Stitch file-per-process part files back into one canonical flat file."""
from __future__ import annotations

import time

from ..cff import CffWriter
from ..core import Selection, assemble_selection
from ..errors import FormatError
from .fpp import PartReader, part_paths


def stitch(parts_dir: str, out_path: str) -> dict:
    t0 = time.perf_counter()
    paths = part_paths(parts_dir)
    if not paths:
        raise FormatError(f"no part files under {parts_dir}")
    parts = {p.rank: p for p in (PartReader(path) for path in paths)}
    try:
        ranks = sorted(parts)
        first = parts[ranks[0]]
        for p in parts.values():
            if [v.name for v in p.defs] != [v.name for v in first.defs]:
                raise FormatError("part files declare different variables")
            if sorted(p.steps) != sorted(first.steps):
                raise FormatError("part files cover different steps")
        steps = sorted(first.steps)
        writer = CffWriter(out_path, first.defs, len(steps))
        for out_step, step in enumerate(steps):
            for vi, vdef in enumerate(first.defs):
                blocks = []
                for p in parts.values():
                    blocks.extend(b for b in p.steps[step] if b.var == vdef.name)
                full = Selection((0,) * len(vdef.global_shape), vdef.global_shape)
                data = assemble_selection(
                    vdef, full, blocks,
                    lambda b: parts[b.writer_rank].fetch_raw(b))
                writer.write_var(out_step, vi, data)
        writer.close()
    finally:
        for p in parts.values():
            p.close()
    return {"steps": len(steps), "parts": len(parts), "out": out_path,
            "seconds": time.perf_counter() - t0}
