"""Background drain of burst-buffer sub-file segments to the PFS."""
from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field

from ..throttle import SharedBucket, stream_id, write_throttled

# Small chunks keep foreground writers from queueing long behind drain
# reservations on the shared bucket.
DRAIN_CHUNK = 512 * 1024


@dataclass
class DrainState:
    bytes_pending: int = 0
    bytes_drained: int = 0
    drained_through_step: int = -1
    seconds: float = 0.0
    errors: list = field(default_factory=list)


class DrainWorker:
    """Copies completed per-step segments from the burst-buffer sub-file to
    the PFS sub-file, preserving offsets, honoring the PFS throttle."""

    def __init__(self, bb_path: str, pfs_path: str, bucket: SharedBucket | None):
        self.bb_path = bb_path
        self.pfs_path = pfs_path
        self.bucket = bucket
        self.stream = stream_id("drain", pfs_path)
        self.state = DrainState()
        self._queue: list[tuple[int, int, int]] = []
        self._cv = threading.Condition()
        self._closing = False
        self._thread = threading.Thread(target=self._run, name="drain", daemon=True)
        self._thread.start()

    def enqueue(self, step: int, offset: int, length: int) -> None:
        with self._cv:
            self._queue.append((step, offset, length))
            self.state.bytes_pending += length
            self._cv.notify()

    def _run(self) -> None:
        src = open(self.bb_path, "rb")
        dst = open(self.pfs_path, "r+b")
        try:
            while True:
                with self._cv:
                    while not self._queue and not self._closing:
                        self._cv.wait()
                    if not self._queue and self._closing:
                        return
                    step, offset, length = self._queue.pop(0)
                t0 = time.perf_counter()
                try:
                    src.seek(offset)
                    dst.seek(offset)
                    remaining = length
                    while remaining:
                        chunk = src.read(min(DRAIN_CHUNK, remaining))
                        if not chunk:
                            raise IOError(f"burst buffer truncated at {offset}")
                        write_throttled(dst, chunk, self.bucket, chunk=DRAIN_CHUNK,
                                        stream=self.stream)
                        remaining -= len(chunk)
                    dst.flush()
                except Exception as exc:  # surfaced at close
                    self.state.errors.append(f"step {step}: {exc}")
                with self._cv:
                    self.state.bytes_pending -= length
                    self.state.bytes_drained += length
                    self.state.drained_through_step = max(
                        self.state.drained_through_step, step)
                    self.state.seconds += time.perf_counter() - t0
                    self._cv.notify_all()
        finally:
            src.close()
            dst.close()

    def close(self, wait: bool = True) -> DrainState:
        with self._cv:
            self._closing = True
            self._cv.notify_all()
        if wait:
            self._thread.join()
        return self.state
