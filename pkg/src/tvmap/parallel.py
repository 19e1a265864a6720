"""Order-preserving parallel map for independent work items.

Results are merged by item index, so the output is identical for any worker
count or schedule.  Threads are used rather than processes: the heavy work is
numpy code that releases the GIL, and thread workers keep closures usable.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def pmap(fn, items, workers: int = 1) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
