"""Runs blocking per-document jobs on an asyncio loop backed by a thread pool"""

import asyncio
import concurrent.futures
import logging
import sys
from typing import Any, Callable, List, Sequence, TypeVar, Union

from .errors import InvalidArgument

log = logging.getLogger(__name__)

T = TypeVar("T")


def setup_asyncio_executor(workers:int=1) -> asyncio.AbstractEventLoop:
    """A fresh event loop whose default executor has the given number of worker threads"""
    if workers < 1:
        raise InvalidArgument(f"need at least one worker, got {workers}")

    if sys.platform == 'win32':
        # the default selector loop on Windows lacks subprocess support
        loop = asyncio.ProactorEventLoop()
    else:
        loop = asyncio.new_event_loop()

    executor = concurrent.futures.ThreadPoolExecutor(max_workers=workers, thread_name_prefix="tempdistill")
    loop.set_default_executor(executor)
    return loop


async def _run_all(loop:asyncio.AbstractEventLoop, fn:Callable[[T], Any], items:Sequence[T]) -> List[Any]:
    tasks = [loop.run_in_executor(None, fn, item) for item in items]
    return await asyncio.gather(*tasks, return_exceptions=True)


def run_jobs(fn:Callable[[T], Any], items:Sequence[T], workers:int=1) -> List[Union[Any, BaseException]]:
    """Apply fn to every item, in input order. A job that raises yields its exception instead of a result.

    With one worker the jobs run inline, without a loop."""
    if workers <= 1:
        results = []
        for item in items:
            # noinspection PyBroadException
            try:
                results.append(fn(item))
            except Exception as e:
                results.append(e)
        return results

    loop = setup_asyncio_executor(workers)
    try:
        results = loop.run_until_complete(_run_all(loop, fn, items))
        log.debug('%i jobs done on %i workers', len(items), workers)
        return results
    finally:
        loop.run_until_complete(loop.shutdown_default_executor())
        loop.close()
