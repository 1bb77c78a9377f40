"""Process pool whose results do not depend on the worker count.

Tasks are pure functions of ``(game, payload)``; the game is shipped once
per worker through the pool initializer and results come back in
submission order.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Sequence

_GAME = None


def _install(game) -> None:
    global _GAME
    _GAME = game


def _invoke(job):
    fn, payload = job
    return fn(_GAME, payload)


def default_workers() -> int:
    return os.cpu_count() or 1


class WorkerPool:
    def __init__(self, game, workers: int = 1):
        self.game = game
        self.workers = max(1, int(workers))
        self._executor: ProcessPoolExecutor | None = None

    def __enter__(self) -> WorkerPool:
        if self.workers > 1:
            self._executor = ProcessPoolExecutor(
                max_workers=self.workers,
                mp_context=mp.get_context("fork"),
                initializer=_install,
                initargs=(self.game,),
            )
        return self

    def __exit__(self, *exc) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def map(self, fn: Callable[[Any, Any], Any], payloads: Sequence[Any]) -> list:
        if self._executor is None:
            return [fn(self.game, p) for p in payloads]
        chunk = max(1, len(payloads) // (4 * self.workers))
        return list(self._executor.map(_invoke, [(fn, p) for p in payloads], chunksize=chunk))
