import threading

import pytest


class ThreadWorld:
    """Run W 'ranks' as threads with an allgather/barrier exchange, for
    exercising engine sessions without spawning processes."""

    def __init__(self, world_size):
        self.world_size = world_size
        self._payloads = {}
        self._barrier = threading.Barrier(world_size)

    def exchange_for(self, rank):
        def exchange(local):
            self._payloads[rank] = local
            self._barrier.wait()
            return dict(self._payloads)
        return exchange

    def run(self, target, timeout=60.0):
        """target(rank, exchange) in one thread per rank; returns results by
        rank; re-raises the first failure."""
        results = {}
        errors = {}

        def body(rank):
            try:
                results[rank] = target(rank, self.exchange_for(rank))
            except Exception as exc:  # noqa: BLE001 - surfaced below
                errors[rank] = exc
                try:
                    self._barrier.abort()
                except Exception:
                    pass

        threads = [threading.Thread(target=body, args=(r,), daemon=True)
                   for r in range(self.world_size)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout)
            if t.is_alive():
                raise TimeoutError("rank thread did not finish")
        if errors:
            rank = min(errors)
            raise errors[rank]
        return results


@pytest.fixture
def thread_world():
    return ThreadWorld
