"""Worker-count control and an order-preserving parallel map.

``ECLOSS_THREADS`` caps the worker pool.  BLAS is pinned to one thread inside
compute sections so that no floating-point reduction depends on the thread
count; parallelism comes only from :func:`ordered_map`.
"""
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

from threadpoolctl import threadpool_limits


def max_workers():
    raw = os.environ.get("ECLOSS_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"ECLOSS_THREADS must be an integer, got {raw!r}") from None
        if n >= 1:
            return n
    return os.cpu_count() or 1


@contextmanager
def blas_limit():
    with threadpool_limits(limits=1, user_api="blas"):
        yield


def ordered_map(fn, items):
    """``list(map(fn, items))``, fanned out over threads when allowed.

    Results come back in input order, so any reduction over them is
    independent of the worker count.
    """
    items = list(items)
    n = min(max_workers(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
