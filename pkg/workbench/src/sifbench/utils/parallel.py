from __future__ import annotations

import asyncio
import concurrent.futures
from collections.abc import Callable, Coroutine, Sequence
from typing import Any, TypeVar

from tqdm import tqdm

from sifbench.utils.console import progress_disabled

T = TypeVar("T")
R = TypeVar("R")


def run_async(coro: Coroutine[Any, Any, T]) -> T:
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return asyncio.run(coro)
    # Inside a notebook loop: hand the coroutine to a private loop on a worker thread.
    with concurrent.futures.ThreadPoolExecutor(max_workers=1) as executor:
        return executor.submit(asyncio.run, coro).result()


async def gather_with_concurrency(
    limit: int,
    fn: Callable[[T], R],
    items: Sequence[T],
    *,
    progress_desc: str | None = None,
) -> list[R]:
    """Run ``fn`` over ``items`` on worker threads, at most ``limit`` at a time.

    Results come back in input order no matter which call finishes first.
    """
    if not items:
        return []

    semaphore = asyncio.Semaphore(max(1, int(limit)))

    async def _run(idx: int, item: T) -> tuple[int, R]:
        async with semaphore:
            return idx, await asyncio.to_thread(fn, item)

    tasks = [asyncio.create_task(_run(idx, item)) for idx, item in enumerate(items)]
    results: list[Any] = [None] * len(items)
    if progress_desc and not progress_disabled():
        for finished in tqdm(asyncio.as_completed(tasks), total=len(tasks), desc=progress_desc):
            idx, value = await finished
            results[idx] = value
    else:
        for idx, value in await asyncio.gather(*tasks):
            results[idx] = value
    return results


def map_concurrently(
    fn: Callable[[T], R],
    items: Sequence[T],
    *,
    limit: int = 4,
    progress_desc: str | None = None,
) -> list[R]:
    """Synchronous front end over :func:`gather_with_concurrency`."""
    if limit <= 1:
        return [fn(item) for item in items]
    return run_async(gather_with_concurrency(limit, fn, items, progress_desc=progress_desc))
