"""Run coordinator and rank process entry point.

Rank processes rendezvous with the coordinator over loopback; the only
services the coordinator provides are tagged allgather exchanges (used by
engines to trade endpoints, doubling as the open barrier) and final report
collection.  All bulk data flows rank-to-rank through the engines.
"""
from __future__ import annotations

import threading
import time
import traceback

from .. import net
from ..core import EngineParams, Selection
from ..codecs import CodecSpec
from ..errors import ConfigError
from .engines import make_engine
from .workload import WorkloadSpec, generate_patch, patch_selection


def params_from_config(cfg: dict) -> EngineParams:
    codec = CodecSpec(cfg.get("codec", "none"), cfg.get("level"),
                      bool(cfg.get("shuffle", False)))
    bb_dir = cfg.get("bb_dir") or None
    drain = cfg.get("drain")
    if drain is None:
        drain = bb_dir is not None
    return EngineParams(
        mode=cfg.get("mode", "aggregated_subfile"),
        aggregation_ratio=int(cfg.get("ratio", 0) or 0),
        pfs_dir=cfg.get("pfs_dir", ""),
        bb_dir=bb_dir,
        drain=bool(drain),
        codec=codec,
        queue_limit=int(cfg.get("queue_limit", 1)),
        queue_full_policy=cfg.get("queue_policy", "block"),
        dataplane=cfg.get("dataplane", "tcp"),
        pfs_bw_mbps=cfg.get("pfs_bw_mbps"),
        comm_latency_us=cfg.get("comm_latency_us"),
    )


class RunCoordinator:
    """Accepts rank JOINs, serves tagged allgathers, gathers reports."""

    def __init__(self, world_size: int, listener):
        self.world = world_size
        self.listener = listener
        self.chans: dict[int, net.Channel] = {}
        self.lock = threading.Condition()
        self.exchanges: dict[str, dict[int, dict]] = {}
        self.reports: dict[int, dict] = {}
        self.failures: dict[int, str] = {}
        self._threads: list[threading.Thread] = []

    def accept_all(self, timeout_s: float = 120.0) -> None:
        self.listener.settimeout(timeout_s)
        for _ in range(self.world):
            sock, _ = self.listener.accept()
            chan = net.Channel(sock)
            _, payload = chan.recv_expect(net.JOIN)
            obj, _ = net.split_obj(payload)
            rank = int(obj["rank"])
            self.chans[rank] = chan
            t = threading.Thread(target=self._rank_loop, args=(rank, chan),
                                 daemon=True)
            t.start()
            self._threads.append(t)
        self.listener.close()

    def _rank_loop(self, rank: int, chan: net.Channel):
        try:
            while True:
                msg_type, payload = chan.recv()
                if msg_type == net.ENDPOINTS:
                    obj, _ = net.split_obj(payload)
                    self._exchange(rank, obj["tag"], obj["data"])
                elif msg_type == net.REPORT:
                    obj, _ = net.split_obj(payload)
                    with self.lock:
                        self.reports[rank] = obj
                        self.lock.notify_all()
                elif msg_type == net.FIN:
                    return
        except EOFError:
            with self.lock:
                if rank not in self.reports:
                    self.failures[rank] = "rank process disconnected"
                self.lock.notify_all()

    def _exchange(self, rank: int, tag: str, data: dict):
        with self.lock:
            pool = self.exchanges.setdefault(tag, {})
            pool[rank] = data
            if len(pool) == self.world:
                result = {str(r): d for r, d in pool.items()}
                for chan in self.chans.values():
                    chan.send_obj(net.ENDPOINT_MAP, {"tag": tag, "data": result})

    def wait_reports(self, deadline_s: float) -> dict[int, dict]:
        deadline = time.monotonic() + deadline_s
        with self.lock:
            while (len(self.reports) + len(self.failures) < self.world
                   and time.monotonic() < deadline):
                self.lock.wait(0.2)
        return dict(self.reports)


# ---------------------------------------------------------------------------
# rank process main

def _exchange_fn(chan: net.Channel, counter: list):
    def exchange(local: dict) -> dict:
        tag = f"x{counter[0]}"
        counter[0] += 1
        chan.send_obj(net.ENDPOINTS, {"tag": tag, "data": local})
        while True:
            _, payload = chan.recv_expect(net.ENDPOINT_MAP)
            obj, _ = net.split_obj(payload)
            if obj["tag"] == tag:
                return {int(r): d for r, d in obj["data"].items()}
    return exchange


def rank_main(rank: int, host: str, port: int, cfg: dict) -> None:
    chan = net.connect(host, port, timeout_s=60.0)
    chan.send_obj(net.JOIN, {"rank": rank})
    try:
        spec = WorkloadSpec.from_config(cfg["workload"])
        params = params_from_config(cfg["engine"])
        defs = spec.variable_defs()
        topology = {"rank": rank, "world_size": spec.ranks,
                    "ranks_per_node": spec.ranks_per_node,
                    "steps_total": spec.steps,
                    "endpoint": cfg["engine"].get("endpoint"),
                    "step_timeout_ms": cfg["engine"].get("step_timeout_ms", 30_000),
                    "rendezvous_readers": cfg["engine"].get("rendezvous_readers", 1)}
        exchange = _exchange_fn(chan, [0])
        engine = make_engine(params, defs, topology, exchange,
                             cfg["artifact"])
        # warm the codec path (imports, tables) outside the timed region
        from ..codecs import encode as _encode
        _encode(bytes(64), 8, params.codec)
        sel = patch_selection(spec, rank)
        write_s = []
        compute_s = []
        for step in range(spec.steps):
            t0 = time.perf_counter()
            patches = [generate_patch(spec, vi, step, sel).tobytes()
                       for vi in range(spec.nvars)]
            if spec.compute_ms:
                time.sleep(spec.compute_ms / 1e3)
            # ranks enter the write burst together, as after a model's
            # synchronized timestep; stragglers otherwise smear the
            # perceived write time of every other rank
            exchange({})
            t1 = time.perf_counter()
            for vi, name in enumerate(spec.var_names):
                engine.put(name, step, sel, patches[vi])
            engine.end_step()
            t2 = time.perf_counter()
            compute_s.append(t1 - t0)
            write_s.append(t2 - t1)
        summary = engine.close()
        chan.send_obj(net.REPORT, {"rank": rank, "status": "ok",
                                   "write_s": write_s, "compute_s": compute_s,
                                   "summary": summary})
    except Exception:
        try:
            chan.send_obj(net.REPORT, {"rank": rank, "status": "error",
                                       "error": traceback.format_exc()})
        except OSError:
            pass
        raise SystemExit(1)
    finally:
        try:
            chan.send(net.FIN)
            chan.close()
        except OSError:
            pass


def capture_main(endpoint: str, out_path: str, workload_cfg: dict,
                 report_path: str, timeout_ms: int = 60_000) -> None:
    """Staging consumer: fetch every announced step fully and write the
    canonical capture file (reader-side replay for verification)."""
    import json

    from ..cff import CffWriter
    from ..staging.reader import StageReader

    spec = WorkloadSpec.from_config(workload_cfg)
    reader = StageReader(endpoint, timeout_ms=timeout_ms)
    writer = CffWriter(out_path, reader.defs, spec.steps)
    per_step = []
    t_start = time.perf_counter()
    out_step = 0
    while True:
        idx = reader.begin_step()
        if idx is None:
            break
        t0 = time.perf_counter()
        for vi, vdef in enumerate(reader.defs):
            writer.write_var(out_step, vi, reader.get_full(vdef.name))
        reader.end_step()
        per_step.append({"step": idx.step, "announce_to_done_s":
                         time.perf_counter() - t0})
        out_step += 1
    writer.close()
    reader.close()
    with open(report_path, "w") as f:
        json.dump({"steps": per_step, "consumer_wall_s":
                   time.perf_counter() - t_start,
                   "protocol_errors": reader.protocol_errors}, f, indent=1)


def launch_config(spec: WorkloadSpec, params_cfg: dict, artifact: str) -> dict:
    if params_cfg.get("mode") == "shared_two_phase" \
            and params_cfg.get("codec", "none") != "none":
        raise ConfigError("shared_two_phase does not allow data compression")
    return {"workload": spec.to_config(), "engine": params_cfg,
            "artifact": artifact}
