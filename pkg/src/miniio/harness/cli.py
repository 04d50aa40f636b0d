"""Command line interface.

Subcommands: run, verify, stitch, consolidate, bench-sweep, dataplane-bench.
Exit codes: 0 ok, 2 verify mismatch, 3 config error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from ..errors import ConfigError, MiniIOError
from .workload import WorkloadSpec

EXIT_OK = 0
EXIT_VERIFY = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc


def _parse_grid(text: str) -> list[int]:
    try:
        parts = [int(p) for p in text.lower().replace("x", ",").split(",")]
    except ValueError:
        raise ConfigError(f"bad grid {text!r}; expected NXxNYxNZ") from None
    if len(parts) != 3:
        raise ConfigError(f"bad grid {text!r}; expected three extents")
    return parts


def _add_workload_flags(p: argparse.ArgumentParser):
    p.add_argument("--grid", help="global grid as NXxNYxNZ")
    p.add_argument("--nvars", type=int)
    p.add_argument("--dtype", choices=["f32", "f64", "i32", "i64", "u8"])
    p.add_argument("--steps", type=int)
    p.add_argument("--compute-ms", type=float, dest="compute_ms")
    p.add_argument("--ranks", type=int)
    p.add_argument("--rpn", type=int, dest="ranks_per_node")
    p.add_argument("--seed", type=int)


def _add_engine_flags(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=["serial_funnel", "file_per_process",
                                      "shared_two_phase", "aggregated_subfile",
                                      "staging"])
    p.add_argument("--ratio", type=int, help="ranks per aggregator (0 = per node)")
    p.add_argument("--codec", choices=["none", "lz4", "zstd", "zlib"])
    p.add_argument("--level", type=int)
    p.add_argument("--shuffle", action="store_true", default=None)
    p.add_argument("--no-shuffle", action="store_false", dest="shuffle")
    p.add_argument("--bb-dir", dest="bb_dir")
    p.add_argument("--drain", action="store_true", default=None)
    p.add_argument("--no-drain", action="store_false", dest="drain")
    p.add_argument("--pfs-bw-mbps", type=float, dest="pfs_bw_mbps")
    p.add_argument("--comm-latency-us", type=float, dest="comm_latency_us")
    p.add_argument("--queue-limit", type=int, dest="queue_limit")
    p.add_argument("--queue-policy", choices=["block", "discard"],
                   dest="queue_policy")
    p.add_argument("--dataplane", choices=["tcp", "shm"])
    p.add_argument("--endpoint", help="staging control endpoint host:port")
    p.add_argument("--rendezvous-readers", type=int, dest="rendezvous_readers",
                   help="readers to wait for before announcing step 0")


_WORKLOAD_KEYS = ("nvars", "dtype", "steps", "compute_ms", "ranks",
                  "ranks_per_node", "seed")
_ENGINE_KEYS = ("mode", "ratio", "codec", "level", "shuffle", "bb_dir",
                "drain", "pfs_bw_mbps", "comm_latency_us", "queue_limit",
                "queue_policy", "dataplane", "endpoint", "rendezvous_readers")


def _merged_config(args) -> dict:
    cfg = _load_config(getattr(args, "config", None))
    workload = dict(cfg.get("workload", {}))
    engine = dict(cfg.get("engine", {}))
    if getattr(args, "grid", None):
        workload["grid"] = _parse_grid(args.grid)
    for key in _WORKLOAD_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            workload[key] = val
    for key in _ENGINE_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            engine[key] = val
    out = getattr(args, "out", None) or cfg.get("out")
    return {"workload": workload, "engine": engine, "out": out}


def _spec_for_artifact(args, artifact: str) -> WorkloadSpec:
    cfg = _merged_config(args)
    if cfg["workload"]:
        return WorkloadSpec.from_config(cfg["workload"])
    report_path = os.path.join(os.path.dirname(os.path.abspath(artifact)),
                               "report.json")
    if os.path.exists(report_path):
        with open(report_path) as f:
            return WorkloadSpec.from_config(json.load(f)["config"]["workload"])
    raise ConfigError("no workload config given and no report.json next to artifact")


def cmd_run(args) -> int:
    from .engines import artifact_path
    from .runner import RunFailure, run
    from .verify import verify

    cfg = _merged_config(args)
    if not cfg["out"]:
        raise ConfigError("run needs --out (or 'out' in the config file)")
    spec = WorkloadSpec.from_config(cfg["workload"])
    try:
        report = run(spec, cfg["engine"], cfg["out"])
    except RunFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    totals = report["totals"]
    print(f"run ok: {len(report['steps'])} steps, "
          f"io_sum {totals['io_sum_s']:.3f}s, wall {totals['wall_s']:.3f}s")
    print(f"report: {os.path.join(cfg['out'], 'report.json')}")
    if args.verify:
        artifact = artifact_path(cfg["engine"].get("mode", "aggregated_subfile"),
                                 cfg["out"])
        result = verify(artifact, spec)
        print(f"verify: {'pass' if result['ok'] else 'FAIL: ' + str(result['error'])}")
        if not result["ok"]:
            return EXIT_VERIFY
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import verify

    spec = _spec_for_artifact(args, args.artifact)
    result = verify(args.artifact, spec)
    if result["ok"]:
        print(f"verify pass ({result['kind']})")
        return EXIT_OK
    print(f"verify FAIL: {result['error']}", file=sys.stderr)
    return EXIT_VERIFY


def cmd_stitch(args) -> int:
    from .stitch import stitch

    report = stitch(args.parts_dir, args.out)
    print(f"stitched {report['parts']} parts x {report['steps']} steps "
          f"-> {report['out']} in {report['seconds']:.3f}s")
    return EXIT_OK


def cmd_consolidate(args) -> int:
    from ..container import consolidate

    report = consolidate(args.container, args.out)
    per_step = ", ".join(f"{s:.3f}" for s in report["per_step_seconds"])
    print(f"consolidated {report['steps']} steps -> {report['out']} "
          f"in {report['total_seconds']:.3f}s (per step: {per_step})")
    return EXIT_OK


def cmd_bench_sweep(args) -> int:
    from .bench import bench_sweep, default_cells

    cfg = _load_config(args.config)
    out = args.out or cfg.get("out")
    if not out:
        raise ConfigError("bench-sweep needs --out (or 'out' in the config)")
    sweep = cfg.get("sweep", {})
    cells = sweep.get("cells") or default_cells(bb_dir=sweep.get("bb_dir"))
    reps = args.repetitions or sweep.get("repetitions", 3)
    base = cfg.get("workload", {})
    result = bench_sweep(base, cells, reps, out)
    print(f"bench-sweep: {len(result['rows'])} runs -> {result['csv']}")
    for label, stats in result["summary"].items():
        print(f"  {label:24s} mean_step_write {stats['mean_step_write_s']:.4f}s "
              f"stored {stats['stored_bytes']}")
    return EXIT_OK


def cmd_dataplane_bench(args) -> int:
    from ..staging.bench import dataplane_bench

    sizes = [int(s) for s in args.sizes.split(",")]
    result = dataplane_bench(sizes, args.blocks, args.out)
    for row in result["rows"]:
        mbps = row["mb_per_s"]
        mbps_txt = f"{mbps:9.1f} MB/s" if mbps != "" else "  (latency only)"
        print(f"  {row['dataplane']:4s} {row['payload_bytes']:>9d} B x "
              f"{row['blocks']:<4d} {mbps_txt}  {row['avg_latency_ms']:7.3f} ms")
    if "shm_ge_tcp" in result["summary"] and not result["summary"]["shm_ge_tcp"]:
        print(f"  note: {result['summary']['note']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miniio",
        description="Step-based parallel I/O toolkit and workload harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="drive a synthetic workload through one mode")
    p.add_argument("--config", help="JSON config file")
    _add_workload_flags(p)
    _add_engine_flags(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--verify", action="store_true",
                   help="verify the artifact after the run")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("verify", help="check an artifact against the oracle")
    p.add_argument("artifact")
    p.add_argument("--config", help="JSON config describing the workload")
    _add_workload_flags(p)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("stitch", help="merge part files into a flat file")
    p.add_argument("parts_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stitch)

    p = sub.add_parser("consolidate", help="container -> canonical flat file")
    p.add_argument("container")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_consolidate)

    p = sub.add_parser("bench-sweep", help="run a configuration matrix")
    p.add_argument("--config", help="JSON config with workload + sweep")
    p.add_argument("--out")
    p.add_argument("--repetitions", type=int)
    p.set_defaults(fn=cmd_bench_sweep)

    p = sub.add_parser("dataplane-bench", help="tcp vs shm dataplane microbench")
    p.add_argument("--sizes", default="1024,65536,1048576",
                   help="comma-separated payload sizes in bytes")
    p.add_argument("--blocks", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataplane_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MiniIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
