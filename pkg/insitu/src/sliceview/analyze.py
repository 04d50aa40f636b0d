"""Per-step slice analysis: stats rows, heatmap images, pipeline timing."""
from __future__ import annotations

import json
import os
import time

import matplotlib
matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402  (heavy; loaded once)

import numpy as np

from .formats import ContainerSource, FlatSource, FormatError
from .wire import StreamSource


def open_source(spec: str, timeout_s: float = 30.0):
    """Container dir, canonical flat file, or host:port staging endpoint."""
    if os.path.isdir(spec):
        return ContainerSource(spec)
    if os.path.isfile(spec):
        return FlatSource(spec)
    if ":" in spec:
        return StreamSource(spec, timeout_s)
    raise FormatError(f"source {spec!r} is neither a path nor host:port")


def render_png(plane: np.ndarray, path: str, vmin: float, vmax: float) -> None:
    # fixed colormap and per-run fixed range so frames are comparable
    fig, ax = plt.subplots(figsize=(4, 4 * plane.shape[1] / max(plane.shape[0], 1)))
    ax.imshow(plane.T, origin="lower", cmap="viridis", vmin=vmin, vmax=vmax,
              interpolation="nearest")
    ax.set_axis_off()
    fig.savefig(path, bbox_inches="tight", pad_inches=0.05, dpi=120)
    plt.close(fig)


def analyze(source_spec: str, var: str, level: int, out_dir: str,
            analysis_ms: float = 0.0, timeout_s: float = 30.0,
            render: bool = True) -> dict:
    """Stepping loop: fetch the z=level slice of ``var`` per step, check it
    against the announced block bounds, append a stats row, render a frame.

    The identical loop body serves files and live endpoints."""
    os.makedirs(out_dir, exist_ok=True)
    source = open_source(source_spec, timeout_s)
    if var not in source.variables:
        raise KeyError(f"variable {var!r} not present in source")
    _, shape = source.variables[var]
    if not 0 <= level < shape[2]:
        raise FormatError(f"level {level} outside [0, {shape[2]})")

    rows = []
    per_step = []
    vmin = vmax = None
    t_start = time.perf_counter()
    out_index = 0
    for step, handle in source.steps():
        t0 = time.perf_counter()
        plane, lo, hi = source.slice_plane(handle, var, level)
        plane64 = plane.astype(np.float64)
        s_min = float(plane64.min())
        s_mean = float(plane64.mean())
        s_max = float(plane64.max())
        if s_min < lo - 1e-9 or s_max > hi + 1e-9:
            raise FormatError(
                f"step {step}: slice range [{s_min}, {s_max}] escapes the "
                f"announced block bounds [{lo}, {hi}]")
        if vmin is None:
            vmin, vmax = s_min, s_max  # frozen at step 0 for comparable frames
        if render:
            render_png(plane64, os.path.join(out_dir, f"step_{step}.png"),
                       vmin, vmax)
        if analysis_ms:
            time.sleep(analysis_ms / 1e3)
        seconds = time.perf_counter() - t0
        rows.append((step, s_min, s_mean, s_max, seconds))
        per_step.append({"step": step, "announce_to_done_s": seconds})
        out_index += 1

    consumer_wall = time.perf_counter() - t_start
    source.close()
    with open(os.path.join(out_dir, "stats.csv"), "w") as f:
        f.write("step,min,mean,max,seconds\n")
        for step, s_min, s_mean, s_max, seconds in rows:
            f.write(f"{step},{s_min!r},{s_mean!r},{s_max!r},{seconds!r}\n")
    timing = {
        "mode": None,  # filled by pipeline comparisons
        "per_step": per_step,
        "totals": {"consumer_wall_s": consumer_wall},
        "steps": out_index,
        "protocol_errors": getattr(source, "protocol_errors", 0),
    }
    with open(os.path.join(out_dir, "timing.json"), "w") as f:
        json.dump(timing, f, indent=1)
    return timing
