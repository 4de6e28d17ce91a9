"""Worker pool for per-chunk gradient evaluation with a fixed reduction order."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import torch


def configure_determinism(deterministic: bool, threads: int | None = None) -> None:
    """In deterministic mode every torch op runs single-threaded; parallelism is over chunks only."""
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
    elif threads:
        torch.set_num_threads(max(1, int(threads)))


class ChunkRunner:
    """Maps a function over chunks and returns results in chunk order.

    Chunk boundaries are chosen by the caller and never depend on the
    number of workers, so any reduction done in result order is identical
    for every thread count.
    """

    def __init__(self, threads: int = 1):
        self.threads = max(1, int(threads or os.cpu_count() or 1))
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self._pool is None or len(items) < 2:
            return [fn(it) for it in items]
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def chunk_slices(n: int, chunk: int) -> list[slice]:
    return [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]
