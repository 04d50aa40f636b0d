"""Convert a sub-file container back into one canonical flat file."""
from __future__ import annotations

import time

from ..cff import CffWriter
from .reader import reader_open


def consolidate(dir_path: str, out_path: str) -> dict:
    """Reassemble every step into the canonical flat format.

    Returns per-step conversion seconds and totals; raises CoverageError
    when any step/variable has gaps."""
    reader = reader_open(dir_path)
    try:
        steps = list(reader.steps())
        writer = CffWriter(out_path, reader.defs, len(steps))
        per_step = []
        t_total = time.perf_counter()
        for out_step, step in enumerate(steps):
            t0 = time.perf_counter()
            for var_index, vdef in enumerate(reader.defs):
                data = reader.read_full(vdef.name, step)
                writer.write_var(out_step, var_index, data)
            per_step.append(time.perf_counter() - t0)
        writer.close()
        return {
            "steps": len(steps),
            "per_step_seconds": per_step,
            "total_seconds": time.perf_counter() - t_total,
            "out": out_path,
        }
    finally:
        reader.close()
