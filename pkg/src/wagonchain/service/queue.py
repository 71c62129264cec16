"""Single-writer backend queue with two priority classes."""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, List, Optional

log = logging.getLogger(__name__)


class Priority(IntEnum):
    INTERACTIVE = 0
    BACKGROUND = 1


@dataclass(order=True)
class BackendTask:
    priority: Priority
    seq: int
    kind: str = field(compare=False)
    fn: Callable[[], Any] = field(compare=False)
    enqueued: float = field(compare=False, default_factory=time.perf_counter)
    future: Future = field(compare=False, default_factory=Future)
    status: str = field(compare=False, default="pending")


class BackendQueue:
    """Tasks run one at a time, interactive before background, FIFO within a class.

    ``on_failure`` is called after a task raised, to bring the state back to
    a consistent ledger; the task's future carries the exception.
    Without a started worker thread, ``drain`` runs tasks in the caller.
    """

    def __init__(self, on_failure: Optional[Callable[[BaseException], None]] = None):
        self._heap: List[BackendTask] = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._run_lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None
        self._stopping = False
        self.on_failure = on_failure
        self.executed: List[str] = []
        self.failed = 0
        self.waits: List[float] = []
        self.keep_history = False

    def submit(self, kind: str, fn: Callable[[], Any], priority: Priority = Priority.INTERACTIVE) -> Future:
        task = BackendTask(priority, next(self._seq), kind, fn)
        with self._cv:
            heapq.heappush(self._heap, task)
            self._cv.notify()
        return task.future

    def __len__(self) -> int:
        with self._cv:
            return len(self._heap)

    def pending(self, priority: Optional[Priority] = None) -> int:
        with self._cv:
            return sum(1 for t in self._heap if priority is None or t.priority == priority)

    def _pop(self) -> Optional[BackendTask]:
        with self._cv:
            return heapq.heappop(self._heap) if self._heap else None

    def _execute(self, task: BackendTask) -> None:
        with self._run_lock:
            self.waits.append(time.perf_counter() - task.enqueued)
            if self.keep_history:
                self.executed.append(task.kind)
            try:
                result = task.fn()
            except Exception as exc:  # isolate the failure, keep the worker alive
                log.exception("backend task %s failed", task.kind)
                task.status = "failed"
                self.failed += 1
                if self.on_failure is not None:
                    self.on_failure(exc)
                task.future.set_exception(exc)
                return
            task.status = "done"
            task.future.set_result(result)

    def drain(self) -> int:
        """Run every pending task (including ones enqueued meanwhile) in this thread."""
        n = 0
        while True:
            task = self._pop()
            if task is None:
                return n
            self._execute(task)
            n += 1

    # -- worker thread ----------------------------------------------------

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stopping = False
        self._thread = threading.Thread(target=self._loop, name="backend-worker", daemon=True)
        self._thread.start()

    def stop(self, timeout: float = 5.0) -> None:
        with self._cv:
            self._stopping = True
            self._cv.notify_all()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None

    @property
    def running(self) -> bool:
        return self._thread is not None

    def _loop(self) -> None:
        while True:
            with self._cv:
                while not self._heap and not self._stopping:
                    self._cv.wait()
                if self._stopping:
                    return
                task = heapq.heappop(self._heap)
            self._execute(task)
