"""Uniform per-rank engine construction for all comparator modes."""
from __future__ import annotations

import os

from ..container import writer_open
from ..container.writer import defs_digest
from ..core import EngineParams, VariableDef
from ..errors import ConfigError, OpenError
from ..staging import StagingParams, stage_writer_open
from ..throttle import bucket_for_dir
from .fpp import FppWriter, part_name
from .funnel import FunnelEngine
from .twophase import TwoPhaseEngine

# io_form analog of each mode (WRF numbering for the first three)
IO_FORM = {"serial_funnel": 2, "file_per_process": 102, "shared_two_phase": 11,
           "aggregated_subfile": "subfile", "staging": "sst"}


def artifact_path(mode: str, out_dir: str) -> str:
    if mode == "aggregated_subfile":
        return os.path.join(out_dir, "run.mbp")
    if mode in ("serial_funnel", "shared_two_phase"):
        return os.path.join(out_dir, "run.cff")
    if mode == "file_per_process":
        return os.path.join(out_dir, "parts")
    if mode == "staging":
        return os.path.join(out_dir, "capture.cff")
    raise ConfigError(f"unknown mode {mode!r}")


def make_engine(params: EngineParams, defs: list[VariableDef],
                topology: dict, exchange, artifact: str):
    mode = params.mode
    if mode == "aggregated_subfile":
        return writer_open(artifact, params, defs, topology, exchange)
    if mode == "staging":
        staging = StagingParams.from_engine(
            params, endpoint=topology.get("endpoint"),
            step_timeout_ms=int(topology.get("step_timeout_ms", 30_000)),
            rendezvous_readers=int(topology.get("rendezvous_readers", 1)))
        return stage_writer_open(params, defs, topology, exchange, staging)
    if mode == "serial_funnel":
        return FunnelEngine(artifact, params, defs, topology, exchange)
    if mode == "shared_two_phase":
        return TwoPhaseEngine(artifact, params, defs, topology, exchange)
    if mode == "file_per_process":
        peers = exchange({"defs": defs_digest(defs)})
        if len({p["defs"] for p in peers.values()}) != 1:
            raise OpenError("inconsistent variable definitions across ranks")
        os.makedirs(artifact, exist_ok=True)
        bucket = bucket_for_dir(params.pfs_dir, params.pfs_bw_mbps)
        return FppWriter(os.path.join(artifact, part_name(topology["rank"])),
                         params, defs, int(topology["rank"]),
                         int(topology["world_size"]), bucket)
    raise ConfigError(f"unknown mode {mode!r}")
