"""Ordered fan-out of per-sample work over a thread pool."""

from __future__ import annotations

import contextvars
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from .errors import ContractError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(
    fn: Callable[[T], R],
    items: Iterable[T],
    jobs: int = 1,
    on_progress: Callable[[int, int], None] | None = None,
) -> list[R]:
    """``[fn(x) for x in items]``, computed on up to ``jobs`` threads.

    Results come back in input order whatever the schedule, and each call runs
    in a copy of the caller's context so numkit precision modes carry over.
    """
    if jobs < 1:
        raise ContractError(f"jobs must be >= 1, got {jobs}")
    items = list(items)
    total = len(items)
    results: list[R] = []
    if jobs == 1 or total <= 1:
        for i, item in enumerate(items, start=1):
            results.append(fn(item))
            if on_progress:
                on_progress(i, total)
        return results

    logger.debug("Running %d items on %d threads", total, jobs)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(contextvars.copy_context().run, fn, item) for item in items]
        for i, future in enumerate(futures, start=1):
            results.append(future.result())
            if on_progress:
                on_progress(i, total)
    return results


__all__ = ["ordered_map"]
