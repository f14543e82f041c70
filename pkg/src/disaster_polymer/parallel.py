"""Worker pool with ordered results.

Every task owns its random stream, and results come back in submission order,
so the number of workers changes wall time only.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional


def worker_count(workers: Optional[int] = None) -> int:
    if workers is not None:
        n = int(workers)
    elif os.environ.get("POLYMER_THREADS"):
        n = int(os.environ["POLYMER_THREADS"])
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ValueError("worker count must be >= 1")
    return n


def ordered_map(fn: Callable, items: Iterable, workers: Optional[int] = None) -> list:
    items = list(items)
    n = worker_count(workers)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
