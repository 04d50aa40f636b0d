"""Benchmark sweeps over engine configurations, averaged over repetitions."""
from __future__ import annotations

import csv
import json
import os

from .engines import artifact_path
from .runner import run
from .workload import WorkloadSpec


def stored_nbytes(artifact: str) -> int:
    """Bytes the artifact occupies for payload purposes."""
    if os.path.isdir(artifact):
        if os.path.exists(os.path.join(artifact, "info.json")):
            import json as _json
            with open(os.path.join(artifact, "info.json")) as f:
                data_dir = _json.load(f).get("data_dir", artifact)
            return sum(os.path.getsize(os.path.join(data_dir, p))
                       for p in os.listdir(data_dir) if p.startswith("data."))
        return sum(os.path.getsize(os.path.join(artifact, p))
                   for p in os.listdir(artifact) if p.endswith(".pfp"))
    return os.path.getsize(artifact)


def subfile_count(artifact: str) -> int | None:
    if os.path.isdir(artifact) and os.path.exists(os.path.join(artifact, "info.json")):
        import json as _json
        with open(os.path.join(artifact, "info.json")) as f:
            data_dir = _json.load(f).get("data_dir", artifact)
        return len([p for p in os.listdir(data_dir) if p.startswith("data.")])
    return None


def bench_sweep(base_workload: dict, cells: list[dict], repetitions: int,
                out_dir: str, timeout_s: float = 600.0) -> dict:
    """Run every cell `repetitions` times; emit bench.csv and summary.json.

    A cell is {"label", "workload": overrides, "engine": engine config}.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for cell in cells:
        wl_cfg = dict(base_workload)
        wl_cfg.update(cell.get("workload", {}))
        spec = WorkloadSpec.from_config(wl_cfg)
        for rep in range(repetitions):
            run_dir = os.path.join(out_dir, cell["label"], f"rep{rep}")
            engine_cfg = dict(cell.get("engine", {}))
            report = run(spec, engine_cfg, run_dir, timeout_s=timeout_s)
            artifact = artifact_path(engine_cfg.get("mode", "aggregated_subfile"),
                                     run_dir)
            steps = report["steps"]
            mean_write = (sum(s["perceived_write_s"] for s in steps) / len(steps)
                          if steps else 0.0)
            rows.append({
                "label": cell["label"], "rep": rep,
                "mode": engine_cfg.get("mode", "aggregated_subfile"),
                "ranks": spec.ranks,
                "ratio": engine_cfg.get("ratio", 0),
                "codec": engine_cfg.get("codec", "none"),
                "shuffle": engine_cfg.get("shuffle", False),
                "bb": bool(engine_cfg.get("bb_dir")),
                "mean_step_write_s": mean_write,
                "io_sum_s": report["totals"]["io_sum_s"],
                "wall_s": report["totals"]["wall_s"],
                "stored_bytes": stored_nbytes(artifact),
                "raw_bytes": spec.step_nbytes * spec.steps,
                "subfiles": subfile_count(artifact),
            })
    csv_path = os.path.join(out_dir, "bench.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    summary: dict = {}
    for cell in cells:
        cell_rows = [r for r in rows if r["label"] == cell["label"]]
        writes = [r["mean_step_write_s"] for r in cell_rows]
        summary[cell["label"]] = {
            "repetitions": len(cell_rows),
            "mean_step_write_s": sum(writes) / len(writes),
            "min_step_write_s": min(writes),
            "max_step_write_s": max(writes),
            "stored_bytes": cell_rows[0]["stored_bytes"],
            "raw_bytes": cell_rows[0]["raw_bytes"],
            "subfiles": cell_rows[0]["subfiles"],
        }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
    return {"rows": rows, "summary": summary, "csv": csv_path}


def default_cells(pfs_bw_mbps: float | None = 100.0,
                  bb_dir: str | None = None) -> list[dict]:
    """The classic comparison matrix: mode ladder, ratio sweep, codec sweep."""
    cells = [
        {"label": "two_phase", "engine": {"mode": "shared_two_phase",
                                          "pfs_bw_mbps": pfs_bw_mbps}},
        {"label": "subfile", "engine": {"mode": "aggregated_subfile",
                                        "pfs_bw_mbps": pfs_bw_mbps}},
    ]
    if bb_dir:
        cells.append({"label": "subfile_bb",
                      "engine": {"mode": "aggregated_subfile", "bb_dir": bb_dir,
                                 "pfs_bw_mbps": pfs_bw_mbps}})
        cells.append({"label": "subfile_bb_zstd",
                      "engine": {"mode": "aggregated_subfile", "bb_dir": bb_dir,
                                 "codec": "zstd", "shuffle": True,
                                 "pfs_bw_mbps": pfs_bw_mbps}})
    return cells
