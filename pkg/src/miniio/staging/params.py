"""Staging runtime parameters."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

from ..core import EngineParams
from ..errors import ConfigError

ENDPOINT_ENV = "MINIIO_ENDPOINT"


@dataclass(frozen=True)
class StagingParams:
    """queue_limit 0 = unbounded (asynchronous: end_step never blocks);
    k >= 1 = at most k unreleased steps buffered.  The first step is not
    announced until ``rendezvous_readers`` readers have connected."""
    queue_limit: int = 1
    queue_full_policy: str = "block"
    dataplane: str = "tcp"
    control_endpoint: str | None = None
    step_timeout_ms: int = 30_000
    rendezvous_readers: int = 1

    def __post_init__(self):
        if self.queue_limit < 0:
            raise ConfigError("queue_limit must be >= 0")
        if self.queue_full_policy not in ("block", "discard"):
            raise ConfigError(f"unknown queue_full_policy {self.queue_full_policy!r}")
        if self.dataplane not in ("tcp", "shm"):
            raise ConfigError(f"unknown dataplane {self.dataplane!r}")
        if self.rendezvous_readers < 0:
            raise ConfigError("rendezvous_readers must be >= 0")

    @classmethod
    def from_engine(cls, params: EngineParams, endpoint: str | None = None,
                    step_timeout_ms: int = 30_000,
                    rendezvous_readers: int = 1) -> "StagingParams":
        return cls(queue_limit=params.queue_limit,
                   queue_full_policy=params.queue_full_policy,
                   dataplane=params.dataplane,
                   control_endpoint=endpoint,
                   step_timeout_ms=step_timeout_ms,
                   rendezvous_readers=rendezvous_readers)


def resolve_endpoint(explicit: str | None) -> tuple[str, int] | None:
    """MINIIO_ENDPOINT environment override wins on both ends."""
    value = os.environ.get(ENDPOINT_ENV) or explicit
    if not value:
        return None
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"bad endpoint {value!r}; expected host:port")
    return host, int(port)


def shm_segment_pattern(session: str) -> str:
    root = "/dev/shm" if os.path.isdir("/dev/shm") else tempfile.gettempdir()
    return os.path.join(root, f"miniio-{session}-r{{rank}}-s{{step}}")
