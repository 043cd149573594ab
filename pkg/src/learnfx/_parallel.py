"""Order-preserving parallel map capped by ``LEARNFX_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "LEARNFX_THREADS"


def thread_count(threads: int | None = None) -> int:
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        if raw:
            try:
                threads = int(raw)
            except ValueError:
                raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        else:
            threads = os.cpu_count() or 1
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def ordered_map(fn, items, threads: int | None = None) -> list:
    """``list(map(fn, items))``, possibly on a thread pool; result order is input order."""
    items = list(items)
    n = min(thread_count(threads), max(len(items), 1))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
