"""Spawn rank processes, drive a workload through one engine mode, report."""
from __future__ import annotations

import multiprocessing as mp
import os
import socket
import time

from .. import net
from ..errors import ConfigError, MiniIOError
from .coordinator import (RunCoordinator, capture_main, launch_config,
                          params_from_config, rank_main)
from .engines import artifact_path
from .report import build_report, write_report
from .workload import WorkloadSpec

START_METHOD_ENV = "MINIIO_START_METHOD"


def _context():
    method = os.environ.get(START_METHOD_ENV) or "fork"
    try:
        return mp.get_context(method)
    except ValueError:
        return mp.get_context("spawn")


def _free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


class RunFailure(MiniIOError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


def run(spec: WorkloadSpec, engine_cfg: dict, out_dir: str,
        timeout_s: float = 600.0) -> dict:
    """Execute one full run; returns the report dict (also written to
    out_dir/report.json and steps.csv)."""
    os.makedirs(out_dir, exist_ok=True)
    engine_cfg = dict(engine_cfg)
    engine_cfg.setdefault("pfs_dir", out_dir)
    params_from_config(engine_cfg)  # validate early -> ConfigError
    mode = engine_cfg.get("mode", "aggregated_subfile")
    artifact = artifact_path(mode, out_dir)
    staging = mode == "staging"
    consumer_report_path = os.path.join(out_dir, "consumer.json")
    if staging and not engine_cfg.get("endpoint"):
        engine_cfg["endpoint"] = f"127.0.0.1:{_free_port()}"

    cfg = launch_config(spec, engine_cfg, artifact)
    listener = net.listener()
    host, port = listener.getsockname()
    ctx = _context()
    t0 = time.perf_counter()
    procs = [ctx.Process(target=rank_main, args=(r, host, port, cfg),
                         name=f"rank{r}")
             for r in range(spec.ranks)]
    consumer = None
    if staging:
        consumer = ctx.Process(
            target=capture_main,
            args=(engine_cfg["endpoint"], artifact, spec.to_config(),
                  consumer_report_path),
            name="consumer")
    # fork before any coordinator threads exist
    for p in procs:
        p.start()
    if consumer is not None:
        consumer.start()

    coord = RunCoordinator(spec.ranks, listener)
    failures: dict[int, str] = {}
    try:
        coord.accept_all()
        init_s = time.perf_counter() - t0
        reports = coord.wait_reports(timeout_s)
        failures = dict(coord.failures)
    finally:
        deadline = time.monotonic() + timeout_s
        for p in procs + ([consumer] if consumer else []):
            p.join(max(0.1, deadline - time.monotonic()))
            if p.is_alive():
                p.terminate()
                p.join(5)
                failures[p.name] = "timed out; terminated"
    wall_s = time.perf_counter() - t0

    for r, rep in reports.items():
        if rep.get("status") != "ok":
            failures[r] = rep.get("error", "unknown rank failure")
    for p in procs:
        if p.exitcode not in (0, None) and p.name not in failures:
            failures[p.name] = f"exit code {p.exitcode}"
    consumer_report = None
    if staging and os.path.exists(consumer_report_path):
        import json
        with open(consumer_report_path) as f:
            consumer_report = json.load(f)
    elif staging:
        failures["consumer"] = "no consumer report produced"

    report = build_report(spec.to_config(), engine_cfg, artifact, reports,
                          wall_s, init_s, consumer=consumer_report,
                          failures=failures)
    write_report(out_dir, report)
    if failures:
        raise RunFailure(f"run failed: {failures}", report=report)
    return report


def run_cfg(config: dict, out_dir: str | None = None) -> dict:
    """run() from a config dict ({workload: {...}, engine: {...}, out: ...})."""
    out = out_dir or config.get("out")
    if not out:
        raise ConfigError("no output directory configured")
    spec = WorkloadSpec.from_config(config.get("workload", {}))
    return run(spec, config.get("engine", {}), out)
