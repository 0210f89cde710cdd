"""Slab-parallel helpers. ``DWIH_THREADS`` caps the worker count."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("DWIH_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


def map_chunks(func, n_items: int, workers: int | None = None, min_chunk: int = 65536):
    """Apply ``func(start, stop)`` over ``range(n_items)`` in contiguous chunks.

    Results come back in chunk order, so any concatenation is independent of
    the worker count as long as ``func`` is itself per-item.
    """
    workers = thread_count() if workers is None else max(1, workers)
    n_chunks = max(1, min(workers, -(-n_items // min_chunk)))
    bounds = [(i * n_items // n_chunks, (i + 1) * n_items // n_chunks) for i in range(n_chunks)]
    if n_chunks == 1:
        return [func(*bounds[0])]
    with ThreadPoolExecutor(max_workers=n_chunks) as pool:
        return list(pool.map(lambda b: func(*b), bounds))
