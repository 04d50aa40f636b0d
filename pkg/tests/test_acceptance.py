"""Acceptance suite: one test per criterion, one printed verdict line each.

Paper-scale magnitudes are hardware-bound and not reproduced; every check
here is property- or trend-based at desk scale.  Run with -s to see the
verdict lines.
"""
import os
import threading
import time

import numpy as np
import pytest

from miniio.cff import CffWriter, files_equal
from miniio.codecs import CodecSpec, encode
from miniio.container import consolidate, reader_open
from miniio.core import DTYPES, EngineParams, Selection, VariableDef, dtype_for
from miniio.harness.bench import bench_sweep, stored_nbytes, subfile_count
from miniio.harness.engines import artifact_path
from miniio.harness.runner import run
from miniio.harness.stitch import stitch
from miniio.harness.verify import verify
from miniio.harness.workload import WorkloadSpec, generate_patch, patch_selection
from miniio.staging import StagingParams, StageReader, stage_writer_open


def verdict(name: str, ok: bool, detail: str = ""):
    state = "PASS" if ok else "FAIL"
    print(f"\n[ACCEPTANCE] {name}: {state}" + (f" ({detail})" if detail else ""))
    return ok


# ---------------------------------------------------------------------------
# Round-trip suite: every mode x codec setting x (BB on/off for the
# sub-file engine), bit-exact read-back via verify().

CODEC_SETTINGS = [
    {},  # none
    {"codec": "lz4", "shuffle": True},   # Blosc-style configuration
    {"codec": "lz4"},
    {"codec": "zstd", "shuffle": True},
    {"codec": "zstd"},
    {"codec": "zlib", "shuffle": True},
    {"codec": "zlib"},
]


def test_round_trip_suite(tmp_path):
    spec = WorkloadSpec(global_shape=(64, 48, 8), nvars=2, steps=3,
                        compute_ms=2, ranks=4, ranks_per_node=2, seed=101)
    t0 = time.perf_counter()
    cases = []
    for codec_cfg in CODEC_SETTINGS:
        cases.append(("aggregated_subfile", dict(codec_cfg)))
        cases.append(("aggregated_subfile",
                      dict(codec_cfg, bb_dir=str(tmp_path / "bb"))))
        cases.append(("serial_funnel", dict(codec_cfg)))
        cases.append(("file_per_process", dict(codec_cfg)))
        cases.append(("staging", dict(codec_cfg)))
    cases.append(("shared_two_phase", {}))

    failures = []
    for i, (mode, engine_cfg) in enumerate(cases):
        out = str(tmp_path / f"case{i}")
        engine_cfg["mode"] = mode
        try:
            run(spec, engine_cfg, out, timeout_s=120)
            result = verify(artifact_path(mode, out), spec)
            if not result["ok"]:
                failures.append(f"{mode} {engine_cfg}: {result['error']}")
        except Exception as exc:  # noqa: BLE001
            failures.append(f"{mode} {engine_cfg}: {exc}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    assert verdict("round-trip suite (mode x codec x shuffle x BB)", ok,
                   f"{len(cases)} runs in {elapsed:.1f}s"
                   + ("; " + "; ".join(failures[:3]) if failures else "")), failures
    assert elapsed < 120, f"round-trip suite took {elapsed:.1f}s (budget 120s)"


# ---------------------------------------------------------------------------
# Oracle equivalence: consolidate/stitch/two-phase/funnel outputs byte-equal
# to the brute-force canonical assembly oracle.

def test_oracle_equivalence(tmp_path):
    spec = WorkloadSpec(global_shape=(16, 16, 4), nvars=2, steps=3,
                        compute_ms=2, ranks=4, ranks_per_node=2, seed=55)
    t0 = time.perf_counter()
    oracle = str(tmp_path / "oracle.cff")
    writer = CffWriter(oracle, spec.variable_defs(), spec.steps)
    for step in range(spec.steps):
        for vi in range(spec.nvars):
            canvas = np.zeros(spec.global_shape, dtype=dtype_for(spec.dtype).np_dtype)
            for rank in range(spec.ranks):
                sel = patch_selection(spec, rank)
                sl = tuple(slice(s, s + c) for s, c in zip(sel.start, sel.count))
                canvas[sl] = generate_patch(spec, vi, step, sel)
            writer.write_var(step, vi, canvas.tobytes())
    writer.close()

    produced = {}
    for mode in ("serial_funnel", "shared_two_phase", "aggregated_subfile",
                 "file_per_process"):
        out = str(tmp_path / mode)
        run(spec, {"mode": mode}, out, timeout_s=120)
        produced[mode] = artifact_path(mode, out)
    consolidate(produced["aggregated_subfile"], str(tmp_path / "cons.cff"))
    stitch(produced["file_per_process"], str(tmp_path / "stitch.cff"))

    comparisons = {
        "serial_funnel": produced["serial_funnel"],
        "shared_two_phase": produced["shared_two_phase"],
        "consolidate": str(tmp_path / "cons.cff"),
        "stitch": str(tmp_path / "stitch.cff"),
    }
    bad = [name for name, path in comparisons.items()
           if not files_equal(oracle, path)]
    elapsed = time.perf_counter() - t0
    assert verdict("oracle equivalence (funnel/two-phase/consolidate/stitch)",
                   not bad and elapsed < 30,
                   f"4 artifacts vs oracle in {elapsed:.1f}s"
                   + (f"; mismatched: {bad}" if bad else "")), bad
    assert elapsed < 30


# ---------------------------------------------------------------------------
# Table-I trend analog at 16 ranks with a 100 MB/s PFS and 200 us latency.

TREND_BASE = {"grid": [160, 120, 20], "nvars": 2, "dtype": "f64", "steps": 3,
              "compute_ms": 40, "ranks": 16, "ranks_per_node": 8, "seed": 9}
TREND_ENGINE = {"pfs_bw_mbps": 100, "comm_latency_us": 200}
REPS = 5


@pytest.fixture(scope="module")
def table_one(tmp_path_factory):
    out = tmp_path_factory.mktemp("table1")
    bb = str(out / "bb")
    cells = [
        {"label": "two_phase", "engine": dict(TREND_ENGINE, mode="shared_two_phase")},
        {"label": "subfile", "engine": dict(TREND_ENGINE, mode="aggregated_subfile")},
        {"label": "subfile_bb",
         "engine": dict(TREND_ENGINE, mode="aggregated_subfile", bb_dir=bb)},
        {"label": "subfile_bb_zstd",
         "engine": dict(TREND_ENGINE, mode="aggregated_subfile", bb_dir=bb,
                        codec="zstd", shuffle=True)},
    ]
    t0 = time.perf_counter()
    result = bench_sweep(TREND_BASE, cells, repetitions=REPS, out_dir=str(out))
    result["elapsed"] = time.perf_counter() - t0
    return result


def test_table_one_trend_throttled_rungs(table_one):
    s = table_one["summary"]
    tp = s["two_phase"]["mean_step_write_s"]
    sub = s["subfile"]["mean_step_write_s"]
    bb = s["subfile_bb"]["mean_step_write_s"]
    gaps = (tp / sub, sub / bb)
    ok = tp > sub > bb and all(g >= 1.15 for g in gaps) \
        and table_one["elapsed"] < 300
    assert verdict(
        "Table-I trend: two_phase > subfile > subfile+BB (gaps >= 15%)", ok,
        f"tp {tp*1e3:.0f}ms / sub {sub*1e3:.0f}ms / bb {bb*1e3:.0f}ms; "
        f"gaps {gaps[0]:.2f}x, {gaps[1]:.2f}x over {REPS} reps in "
        f"{table_one['elapsed']:.0f}s")


def test_table_one_trend_compression_rung(table_one):
    # The paper's final rung: compression must cut the perceived BB write
    # time by >= 15%.  This requires storage/wire slower than the
    # compressor; on this CPU-starved host zstd (~0.25 GB/s/core) is slower
    # than the loopback fan-in path it would relieve, so the rung is
    # expected to fail here.  The criterion is asserted as specified.
    s = table_one["summary"]
    bb = s["subfile_bb"]["mean_step_write_s"]
    bbz = s["subfile_bb_zstd"]["mean_step_write_s"]
    gap = bb / bbz
    ok = gap >= 1.15
    verdict("Table-I trend: subfile+BB > subfile+BB+zstd (gap >= 15%)", ok,
            f"bb {bb*1e3:.0f}ms / bb+zstd {bbz*1e3:.0f}ms; gap {gap:.2f}x "
            f"(stored {s['subfile_bb']['stored_bytes']} -> "
            f"{s['subfile_bb_zstd']['stored_bytes']})")
    assert ok, (
        f"compression rung gap {gap:.2f}x < 1.15x: zstd costs more CPU than "
        "the unthrottled burst-buffer path saves on this host")


# ---------------------------------------------------------------------------
# Aggregator-ratio law (2 simulated nodes x 8 ranks).

def test_aggregator_ratio_law(tmp_path):
    base = {"grid": [160, 120, 24], "nvars": 6, "dtype": "f32", "steps": 2,
            "compute_ms": 20, "ranks": 8, "ranks_per_node": 4, "seed": 13}
    engine = {"mode": "aggregated_subfile", "pfs_bw_mbps": 50,
              "comm_latency_us": 1000}
    cells = [{"label": f"ratio{r}", "engine": dict(engine, ratio=r)}
             for r in (1, 2, 4)]
    result = bench_sweep(base, cells, repetitions=3, out_dir=str(tmp_path))
    s = result["summary"]
    counts = {label: s[label]["subfiles"] for label in ("ratio1", "ratio2", "ratio4")}
    counts_ok = counts == {"ratio1": 8, "ratio2": 4, "ratio4": 2}
    r1 = s["ratio1"]["mean_step_write_s"]
    rpn = s["ratio4"]["mean_step_write_s"]
    trend_ok = r1 >= rpn
    assert verdict("aggregator-ratio law (counts exact; ratio=1 >= ratio=rpn)",
                   counts_ok and trend_ok,
                   f"subfiles {counts}; ratio1 {r1*1e3:.0f}ms vs "
                   f"ratio=rpn {rpn*1e3:.0f}ms")


# ---------------------------------------------------------------------------
# Burst-buffer scaling: BB <= 1/3 x no-BB; byte-identical PFS container.

def test_burst_buffer_scaling(tmp_path):
    base = {"grid": [160, 120, 16], "nvars": 4, "dtype": "f32", "steps": 2,
            "compute_ms": 20, "ranks": 8, "ranks_per_node": 4, "seed": 17}
    engine = {"mode": "aggregated_subfile", "pfs_bw_mbps": 18,
              "comm_latency_us": 200}
    cells = [
        {"label": "pfs", "engine": dict(engine)},
        {"label": "bb", "engine": dict(engine, bb_dir=str(tmp_path / "nvme"))},
    ]
    result = bench_sweep(base, cells, repetitions=3, out_dir=str(tmp_path))
    s = result["summary"]
    pfs = s["pfs"]["mean_step_write_s"]
    bb = s["bb"]["mean_step_write_s"]
    speed_ok = bb <= pfs / 3

    # byte-equivalence: drained container equals the direct-PFS container
    a = artifact_path("aggregated_subfile", str(tmp_path / "pfs" / "rep0"))
    b = artifact_path("aggregated_subfile", str(tmp_path / "bb" / "rep0"))
    same = files_equal(os.path.join(a, "index.jsonl"), os.path.join(b, "index.jsonl"))
    for name in sorted(p for p in os.listdir(a) if p.startswith("data.")):
        same = same and files_equal(os.path.join(a, name), os.path.join(b, name))
    assert verdict("burst-buffer scaling (BB <= 1/3 x no-BB; BB-equivalence)",
                   speed_ok and same,
                   f"no-BB {pfs*1e3:.0f}ms vs BB {bb*1e3:.0f}ms "
                   f"({bb/pfs:.2f}x); byte-identical: {same}")


# ---------------------------------------------------------------------------
# Compression: ratio > 2 with zstd+shuffle; stored < raw for all four codec
# settings; compressed perceived write faster under a throttled PFS.

def test_compression_criteria(tmp_path):
    base = {"grid": [192, 144, 20], "nvars": 6, "dtype": "f32", "steps": 2,
            "compute_ms": 20, "ranks": 8, "ranks_per_node": 4, "seed": 23}
    engine = {"mode": "aggregated_subfile", "pfs_bw_mbps": 100}
    settings = {
        "none": {},
        "blosclz_analog": {"codec": "lz4", "shuffle": True},
        "lz4": {"codec": "lz4"},
        "zstd_shuffle": {"codec": "zstd", "shuffle": True},
        "zlib_shuffle": {"codec": "zlib", "shuffle": True},
    }
    cells = [{"label": label, "engine": dict(engine, **cfg)}
             for label, cfg in settings.items()]
    result = bench_sweep(base, cells, repetitions=3, out_dir=str(tmp_path))
    s = result["summary"]
    raw = s["none"]["stored_bytes"]
    ratio = raw / s["zstd_shuffle"]["stored_bytes"]
    ratio_ok = ratio > 2.0
    smaller = {label: s[label]["stored_bytes"] < raw
               for label in settings if label != "none"}
    size_ok = all(smaller.values())
    t_none = s["none"]["mean_step_write_s"]
    t_zstd = s["zstd_shuffle"]["mean_step_write_s"]
    direction_ok = t_zstd < t_none
    assert verdict(
        "compression (zstd+shuffle ratio > 2; stored < raw x4; faster on PFS)",
        ratio_ok and size_ok and direction_ok,
        f"ratio {ratio:.2f}; stored<raw {smaller}; "
        f"write {t_none*1e3:.0f}ms -> {t_zstd*1e3:.0f}ms")


# ---------------------------------------------------------------------------
# Queue-limit semantics (slow consumer, 1-rank writer).

DEFS_Q = [VariableDef("T", DTYPES["f32"], (32, 32))]
FULL_Q = Selection((0, 0), (32, 32))


def _producer(writer, steps, durations):
    data = np.arange(1024, dtype="<f4").tobytes()
    for step in range(steps):
        writer.put("T", step, FULL_Q, data)
        t0 = time.perf_counter()
        writer.end_step()
        durations.append(time.perf_counter() - t0)
    writer.close()


def _consume(reader, hold_s):
    while True:
        idx = reader.begin_step()
        if idx is None:
            break
        time.sleep(hold_s)
        reader.end_step()
    reader.close()


def _open_writer(queue_limit):
    params = EngineParams(mode="staging", queue_limit=queue_limit)
    staging = StagingParams.from_engine(params)
    return stage_writer_open(params, DEFS_Q, {"rank": 0, "world_size": 1},
                             lambda local: {0: local}, staging)


def test_queue_limit_semantics():
    hold_s = 0.120
    # queue_limit=1, block: end_step stalls at least the consumer hold.
    # The reader connects before any step is produced.
    writer = _open_writer(1)
    host, port = writer.control_endpoint
    reader = StageReader(f"{host}:{port}")
    durations = []
    t = threading.Thread(target=_consume, args=(reader, hold_s), daemon=True)
    t.start()
    _producer(writer, 3, durations)
    t.join(20)
    stall_ok = all(d >= hold_s - 0.010 for d in durations[1:])
    limit_ok = writer.max_unreleased <= 1

    # queue_limit=0: end_step independent of the slow consumer
    writer0 = _open_writer(0)
    host, port = writer0.control_endpoint
    reader0 = StageReader(f"{host}:{port}")
    durations0 = []
    t = threading.Thread(target=_consume, args=(reader0, hold_s), daemon=True)
    t.start()
    _producer(writer0, 3, durations0)
    t.join(20)
    async_ok = max(durations0) < 0.010
    assert verdict(
        "queue-limit semantics (k=1 stalls >= hold; k=0 < 10 ms; max <= k)",
        stall_ok and limit_ok and async_ok,
        f"k=1 stalls {[f'{d*1e3:.0f}' for d in durations[1:]]}ms vs hold "
        f"{hold_s*1e3:.0f}ms; k=0 max {max(durations0)*1e3:.1f}ms; "
        f"max unreleased {writer.max_unreleased}")


# ---------------------------------------------------------------------------
# Transport transparency: container, staging/tcp, staging/shm byte-identical.

def test_transport_transparency(tmp_path):
    spec = WorkloadSpec(global_shape=(48, 32, 8), nvars=2, steps=3,
                        compute_ms=2, ranks=4, ranks_per_node=2, seed=77)
    run(spec, {"mode": "aggregated_subfile", "codec": "zstd", "shuffle": True},
        str(tmp_path / "file"), timeout_s=120)
    consolidate(artifact_path("aggregated_subfile", str(tmp_path / "file")),
                str(tmp_path / "file.cff"))
    run(spec, {"mode": "staging", "dataplane": "tcp", "codec": "zstd",
               "shuffle": True}, str(tmp_path / "tcp"), timeout_s=120)
    run(spec, {"mode": "staging", "dataplane": "shm", "codec": "zstd",
               "shuffle": True}, str(tmp_path / "shm"), timeout_s=120)
    tcp_cff = artifact_path("staging", str(tmp_path / "tcp"))
    shm_cff = artifact_path("staging", str(tmp_path / "shm"))
    ok = (files_equal(str(tmp_path / "file.cff"), tcp_cff)
          and files_equal(str(tmp_path / "file.cff"), shm_cff))
    assert verdict("transport transparency (container == tcp == shm)", ok)
