"""
Runs independent trial jobs either in-process or on a pool of spawned worker processes.
"""

import logging
from typing import Any, Callable, List, Sequence

import torch.multiprocessing as mp

logger = logging.getLogger(__name__)

_WORKER_FN = None
_WORKER_SHARED = None


def _install(fn: Callable, shared: Any):
    global _WORKER_FN, _WORKER_SHARED
    _WORKER_FN = fn
    _WORKER_SHARED = shared


def _call(item: Any) -> Any:
    return _WORKER_FN(_WORKER_SHARED, item)


def map_trials(fn: Callable, items: Sequence[Any], workers: int = 1, shared: Any = None) -> List[Any]:
    """
    Applies fn(shared, item) to every item. The shared object is sent once per worker process. Results come back in
    item order, so the output does not depend on the number of workers.

    :param fn: A picklable module-level function
    :param items: The jobs
    :param workers: Number of processes. 1 runs everything in the calling process.
    :param shared: Read-only data every job needs (the query pool)
    :return: results in the order of items
    """
    items = list(items)
    if workers < 1:
        raise ValueError(f'workers must be at least 1, got {workers}')
    if workers == 1 or len(items) <= 1:
        return [fn(shared, item) for item in items]

    context = mp.get_context('spawn')
    processes = min(workers, len(items))
    logger.info(f'Starting {processes} trial workers.')
    pool = context.Pool(processes, initializer=_install, initargs=(fn, shared))
    try:
        return pool.map(_call, items)
    finally:
        pool.close()
        pool.join()
