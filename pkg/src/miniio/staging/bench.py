"""Dataplane micro-benchmark: per-size throughput and latency for the
stream-socket and shared-memory paths."""
from __future__ import annotations

import csv
import json
import os
import threading
import time

from ..codecs import CodecSpec
from ..core import DTYPES, EngineParams, Selection, VariableDef
from .params import StagingParams
from .writer import stage_writer_open


def _run_one(dataplane: str, payload_bytes: int, blocks: int) -> dict:
    nelems = max(payload_bytes // 4, 1)
    defs = [VariableDef("B", DTYPES["f32"], (nelems,))]
    params = EngineParams(mode="staging", queue_limit=0, dataplane=dataplane,
                          codec=CodecSpec.none())
    staging = StagingParams.from_engine(params)
    writer = stage_writer_open(params, defs, {"rank": 0, "world_size": 1},
                               lambda local: {0: local}, staging)
    sel = Selection((0,), (nelems,))
    body = os.urandom(nelems * 4)  # incompressible: measures the wire, not a codec

    def produce():
        for step in range(blocks):
            writer.put("B", step, sel, body)
            writer.end_step()
        writer.close()

    from .reader import StageReader
    host, port = writer.control_endpoint
    reader = StageReader(f"{host}:{port}")
    t = threading.Thread(target=produce, daemon=True)
    latencies = []
    t_first = None
    fetched = 0
    t.start()
    while True:
        t0 = time.perf_counter()
        idx = reader.begin_step()
        if idx is None:
            break
        if payload_bytes > 0:
            data = reader.get("B", sel)
            fetched += len(data)
        reader.end_step()
        if t_first is None:
            t_first = t0
        latencies.append(time.perf_counter() - t0)
    t_total = time.perf_counter() - (t_first or time.perf_counter())
    reader.close()
    t.join(30)
    row = {
        "dataplane": dataplane,
        "payload_bytes": payload_bytes,
        "blocks": blocks,
        "avg_latency_ms": 1e3 * sum(latencies) / max(len(latencies), 1),
        "mb_per_s": (fetched / t_total / 1e6) if (fetched and t_total > 0) else "",
    }
    return row


def dataplane_bench(sizes: list[int], blocks: int, out_dir: str,
                    dataplanes: tuple[str, ...] = ("tcp", "shm")) -> dict:
    """Emit per-size mean throughput and latency per dataplane.

    Relative speed is hardware-dependent; the summary flags (but never
    fails on) a shared-memory path slower than the socket path."""
    os.makedirs(out_dir, exist_ok=True)
    rows = [_run_one(dp, size, blocks) for size in sizes for dp in dataplanes]
    csv_path = os.path.join(out_dir, "dataplane.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    throughput = {dp: [r["mb_per_s"] for r in rows
                       if r["dataplane"] == dp and r["mb_per_s"] != ""]
                  for dp in dataplanes}
    summary = {"rows": len(rows), "csv": csv_path}
    if all(throughput.get(dp) for dp in ("tcp", "shm")):
        shm_ge_tcp = (sum(throughput["shm"]) / len(throughput["shm"])
                      >= sum(throughput["tcp"]) / len(throughput["tcp"]))
        summary["shm_ge_tcp"] = shm_ge_tcp
        if not shm_ge_tcp:
            summary["note"] = ("shared-memory path measured slower than the "
                               "socket path on this host (reported, not failed)")
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
    return {"rows": rows, "summary": summary}
