"""End-to-end pipeline comparison: in-situ streaming vs process-after-run.

The producer is whatever command implements the producer CLI (default:
``miniio``); it is driven strictly through its command line, and the stream
through the published wire protocol.
"""
from __future__ import annotations

import json
import os
import socket
import subprocess
import threading
import time

from .analyze import analyze


def _free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def _workload_flags(workload: dict) -> list[str]:
    flags = []
    grid = workload.get("grid")
    if grid:
        flags += ["--grid", "x".join(str(v) for v in grid)]
    for key, flag in (("nvars", "--nvars"), ("dtype", "--dtype"),
                      ("steps", "--steps"), ("compute_ms", "--compute-ms"),
                      ("ranks", "--ranks"), ("ranks_per_node", "--rpn"),
                      ("seed", "--seed")):
        if key in workload:
            flags += [flag, str(workload[key])]
    return flags


def _run_producer(cmd: list[str], extra: list[str], out_dir: str) -> float:
    t0 = time.perf_counter()
    proc = subprocess.run(cmd + extra + ["--out", out_dir],
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"producer failed ({proc.returncode}):\n{proc.stdout}\n{proc.stderr}")
    return time.perf_counter() - t0


def pipeline_compare(config: dict, out_dir: str) -> dict:
    """Run the same workload twice: (a) staging producer with a concurrent
    streaming consumer, (b) shared-file producer with analysis afterwards.
    Emits timing.json with both PipelineTimings and their ratio."""
    workload = config.get("workload", {})
    var = config.get("var", "T")
    level = int(config.get("level", 0))
    analysis_ms = float(config.get("analysis_ms", 0.0))
    producer_cmd = list(config.get("producer_cmd", ["miniio"])) + ["run"]
    flags = _workload_flags(workload)
    os.makedirs(out_dir, exist_ok=True)

    # (a) in-situ: consumer runs while the producer computes and streams
    endpoint = f"127.0.0.1:{_free_port()}"
    insitu_dir = os.path.join(out_dir, "in_situ")
    timing_a: dict = {}
    errors: list = []

    def consume():
        try:
            timing_a.update(analyze(endpoint, var, level,
                                    os.path.join(insitu_dir, "analysis"),
                                    analysis_ms=analysis_ms, timeout_s=60))
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    t0 = time.perf_counter()
    consumer = threading.Thread(target=consume, daemon=True)
    consumer.start()
    # queue_limit=0: fully asynchronous streaming, the producer never waits
    producer_wall_a = _run_producer(
        producer_cmd,
        flags + ["--mode", "staging", "--endpoint", endpoint,
                 "--queue-limit", "0",
                 "--rendezvous-readers", "2"],  # capture consumer + this one
        os.path.join(insitu_dir, "run"))
    consumer.join(120)
    if errors:
        raise errors[0]
    end_to_end_a = time.perf_counter() - t0

    # (b) after-run: produce the shared file, then analyze it
    after_dir = os.path.join(out_dir, "after_run")
    t0 = time.perf_counter()
    producer_wall_b = _run_producer(
        producer_cmd, flags + ["--mode", "shared_two_phase"],
        os.path.join(after_dir, "run"))
    timing_b = analyze(os.path.join(after_dir, "run", "run.cff"), var, level,
                       os.path.join(after_dir, "analysis"),
                       analysis_ms=analysis_ms)
    end_to_end_b = time.perf_counter() - t0

    result = {
        "in_situ": {
            "mode": "in_situ",
            "per_step": timing_a.get("per_step", []),
            "totals": {
                "producer_wall_s": producer_wall_a,
                "consumer_wall_s": timing_a["totals"]["consumer_wall_s"],
                "end_to_end_s": end_to_end_a,
            },
        },
        "after_run": {
            "mode": "after_run",
            "per_step": timing_b.get("per_step", []),
            "totals": {
                "producer_wall_s": producer_wall_b,
                "consumer_wall_s": timing_b["totals"]["consumer_wall_s"],
                "end_to_end_s": end_to_end_b,
            },
        },
        "end_to_end_ratio": end_to_end_a / end_to_end_b if end_to_end_b else None,
    }
    with open(os.path.join(out_dir, "timing.json"), "w") as f:
        json.dump(result, f, indent=1)
    return result
