import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def n_threads():
    """Worker count from ``DFPO_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("DFPO_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("DFPO_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def map_chunks(fn, n_items, min_chunk=16):
    """Apply ``fn(lo, hi)`` over contiguous index ranges; results come back in index order."""
    workers = min(n_threads(), max(1, n_items // min_chunk))
    if workers <= 1 or n_items == 0:
        return [fn(0, n_items)]
    edges = np.linspace(0, n_items, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, edges[:-1], edges[1:]))
