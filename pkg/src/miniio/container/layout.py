"""Container directory layout, session metadata, and aggregator assignment."""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

from ..core import EngineParams, VariableDef, dtype_for
from ..errors import ConfigError, OpenError

FORMAT_VERSION = 1
INFO_NAME = "info.json"
INDEX_NAME = "index.jsonl"


@dataclass(frozen=True)
class AggregatorMap:
    """rank -> (aggregator rank, sub-file id); groups never span a node."""
    world_size: int
    ranks_per_node: int
    aggregation_ratio: int
    rank_to_agg: tuple[int, ...]
    rank_to_subfile: tuple[int, ...]

    @property
    def num_subfiles(self) -> int:
        return max(self.rank_to_subfile) + 1

    @property
    def aggregators(self) -> list[int]:
        seen = []
        for agg in self.rank_to_agg:
            if agg not in seen:
                seen.append(agg)
        return seen

    def group_of(self, subfile_id: int) -> list[int]:
        return [r for r in range(self.world_size)
                if self.rank_to_subfile[r] == subfile_id]

    def subfile_of_agg(self, agg_rank: int) -> int:
        return self.rank_to_subfile[agg_rank]


def aggregator_map(world_size: int, ranks_per_node: int,
                   aggregation_ratio: int) -> AggregatorMap:
    """Within each node, consecutive groups of ``aggregation_ratio`` ranks
    share one aggregator (the lowest rank of the group); sub-file ids are
    dense in rank order."""
    if world_size < 1 or ranks_per_node < 1:
        raise ConfigError("world_size and ranks_per_node must be positive")
    if world_size % ranks_per_node:
        raise ConfigError(
            f"world_size {world_size} not divisible by ranks_per_node {ranks_per_node}")
    if not 1 <= aggregation_ratio <= ranks_per_node:
        raise ConfigError(
            f"aggregation_ratio {aggregation_ratio} outside [1, {ranks_per_node}]")
    rank_to_agg = []
    rank_to_subfile = []
    subfile = -1
    for rank in range(world_size):
        within_node = rank % ranks_per_node
        if within_node % aggregation_ratio == 0:
            subfile += 1
            agg = rank
        else:
            agg = rank - (within_node % aggregation_ratio)
        rank_to_agg.append(agg)
        rank_to_subfile.append(subfile)
    return AggregatorMap(world_size, ranks_per_node, aggregation_ratio,
                         tuple(rank_to_agg), tuple(rank_to_subfile))


class ContainerLayout:
    """Paths inside one container directory (conventionally *.mbp)."""

    def __init__(self, dir_path: str, data_dir: str | None = None):
        self.dir = os.path.abspath(dir_path)
        self.data_dir = os.path.abspath(data_dir) if data_dir else self.dir

    @property
    def info_path(self) -> str:
        return os.path.join(self.dir, INFO_NAME)

    @property
    def index_path(self) -> str:
        return os.path.join(self.dir, INDEX_NAME)

    def subfile_path(self, subfile_id: int) -> str:
        return os.path.join(self.data_dir, f"data.{subfile_id}")

    def pfs_subfile_path(self, subfile_id: int) -> str:
        return os.path.join(self.dir, f"data.{subfile_id}")


def bb_data_dir(bb_root: str, container_dir: str) -> str:
    return os.path.join(os.path.abspath(bb_root),
                        os.path.basename(os.path.abspath(container_dir)))


def write_info(layout: ContainerLayout, params: EngineParams,
               defs: list[VariableDef], world_size: int, ranks_per_node: int,
               aggregation_ratio: int, data_dir: str | None = None) -> None:
    obj = {
        "format_version": FORMAT_VERSION,
        "created_unix_ms": int(time.time() * 1000),
        "world_size": world_size,
        "ranks_per_node": ranks_per_node,
        "aggregation_ratio": aggregation_ratio,
        "variables": [{"name": v.name, "dtype": v.dtype.tag,
                       "shape": list(v.global_shape)} for v in defs],
        "params": {"codec": params.codec.codec, "level": params.codec.level,
                   "shuffle": params.codec.shuffle, "mode": params.mode},
    }
    if data_dir:
        # sub-files live outside the container (burst buffer without drain)
        obj["data_dir"] = data_dir
    tmp = layout.info_path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, separators=(",", ":"))
    os.replace(tmp, layout.info_path)


def read_info(dir_path: str) -> tuple[ContainerLayout, dict, list[VariableDef]]:
    info_path = os.path.join(dir_path, INFO_NAME)
    try:
        with open(info_path) as f:
            info = json.load(f)
    except FileNotFoundError:
        raise OpenError(f"{dir_path} has no {INFO_NAME}; not a container") from None
    except json.JSONDecodeError as exc:
        raise OpenError(f"bad {INFO_NAME}: {exc}") from exc
    defs = [VariableDef(v["name"], dtype_for(v["dtype"]), tuple(v["shape"]))
            for v in info["variables"]]
    layout = ContainerLayout(dir_path, info.get("data_dir"))
    return layout, info, defs
