"""Token-bucket bandwidth throttling for writes into the simulated PFS.

The bucket is shared by every writer process of a run through a small
flock-protected state file, so the configured rate is a *global* bandwidth
ceiling no matter how many processes write concurrently.  Burst-buffer
directories are never throttled.
"""
from __future__ import annotations

import fcntl
import os
import struct
import time

BUCKET_FILENAME = ".miniio.bucket"
DEFAULT_CHUNK = 1 << 20

# Fixed stream-switch cost: the simulated PFS is a striped spinning-disk
# array, so interleaved write streams pay a seek whenever the array has to
# jump between files/regions.  Interleaved writers of the SAME file pay the
# write-lock handoff on top (the shared-file contention coordinated
# MPI-I/O is known for, which sub-file writing avoids by construction).
SEEK_S = 2e-3
LOCK_HANDOFF_S = 5e-3


class SharedBucket:
    """Virtual-time leaky bucket shared across processes via a lock file.

    acquire(n, stream) reserves n bytes worth of time on the shared timeline
    (plus a seek when the previous reservation belonged to a different
    stream) and sleeps until the reservation drains; total wall time for N
    bytes is >= N / rate regardless of the number of concurrent writers.
    """

    def __init__(self, path: str, rate_bytes_per_s: float):
        if rate_bytes_per_s <= 0:
            raise ValueError("rate must be positive")
        self.path = path
        self.rate = float(rate_bytes_per_s)
        fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            if os.fstat(fd).st_size < 24:
                os.write(fd, struct.pack("<dQQ", 0.0, 0, 0))
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
            os.close(fd)

    def acquire(self, nbytes: int, stream: int = 0, file_tag: int = 0) -> None:
        if nbytes <= 0:
            return
        cost = nbytes / self.rate
        stream &= 0xFFFFFFFFFFFFFFFF
        file_tag &= 0xFFFFFFFFFFFFFFFF
        fd = os.open(self.path, os.O_RDWR)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            now = time.monotonic()
            t_next, last_stream, last_file = struct.unpack("<dQQ", os.pread(fd, 24, 0))
            if stream and last_stream and stream != last_stream:
                if file_tag and file_tag == last_file:
                    cost += LOCK_HANDOFF_S  # another writer of the same file
                else:
                    cost += SEEK_S
            start = max(now, t_next)
            os.pwrite(fd, struct.pack("<dQQ", start + cost, stream, file_tag), 0)
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
            os.close(fd)
        # Sleep until our reservation has fully drained.
        delay = (start + cost) - time.monotonic()
        if delay > 0:
            time.sleep(delay)


def bucket_for_dir(root: str, rate_mbps: float | None) -> SharedBucket | None:
    """Bucket shared by all writers under ``root``; None when unthrottled."""
    if not rate_mbps:
        return None
    os.makedirs(root, exist_ok=True)
    return SharedBucket(os.path.join(root, BUCKET_FILENAME), rate_mbps * 1e6)


def stream_id(*parts) -> int:
    """Stable nonzero stream tag for seek accounting (process-independent)."""
    import zlib
    text = "\x1f".join(str(p) for p in parts).encode()
    return ((zlib.crc32(text) << 16) ^ zlib.crc32(text[::-1]) ^ len(text)) | 1


def write_throttled(fileobj, data, bucket: SharedBucket | None,
                    chunk: int = DEFAULT_CHUNK, stream: int = 0) -> int:
    """Write ``data`` to ``fileobj`` paying bucket time per chunk."""
    view = memoryview(data)
    if bucket is None:
        fileobj.write(view)
        return len(view)
    written = 0
    while written < len(view):
        part = view[written:written + chunk]
        bucket.acquire(len(part), stream)
        fileobj.write(part)
        written += len(part)
    return len(view)
