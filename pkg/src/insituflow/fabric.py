"""In-process message fabric: one worker thread per global rank.

Two clocks share the same interface:

* :class:`VirtualFabric` runs workers cooperatively. Exactly one worker
  holds the baton at any time; the scheduler advances a discrete-event
  clock to the earliest pending delivery or timer, ties broken by
  (time, destination rank, sequence). Runs are bit-reproducible and
  quiescence (deadlock) is detectable.
* :class:`RealFabric` runs workers truly concurrently with condition
  variables and measures wall-clock time.

Workers interact only through :meth:`post` and :meth:`wait`.
"""
from __future__ import annotations

import heapq
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import DeadlockError, WorkflowError


class Aborted(BaseException):
    """Raised inside a worker when the run is being torn down."""


@dataclass
class Message:
    src: int
    dst: int
    kind: str
    channel: int | None = None
    tag: Any = None
    body: Any = None
    nbytes: int = 0
    sent: float = 0.0
    delivered: float = 0.0
    xfer: float = 0.0
    seq: int = field(default=0, compare=False)


_DELIVER, _TIMER, _START = 0, 1, 2


class _Base:
    def __init__(self, nranks: int):
        self.nranks = nranks
        self.errors: dict[int, BaseException] = {}
        self.done = [False] * nranks
        self._abort = False

    def cost(self, nbytes: int) -> float:
        return 0.0


class VirtualFabric(_Base):
    virtual = True

    def __init__(self, nranks: int, latency: float = 0.0, per_byte: float = 0.0):
        super().__init__(nranks)
        self.latency = latency
        self.per_byte = per_byte
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._tokens = itertools.count(1)
        self._boxes: list[list[Message]] = [[] for _ in range(nranks)]
        self._waiting: dict[int, tuple[Callable, int | None, str]] = {}
        self._result: dict[int, Message | None] = {}
        self._resume = [threading.Semaphore(0) for _ in range(nranks)]
        self._back = threading.Semaphore(0)
        self._started = [False] * nranks

    def time(self) -> float:
        return self.now

    def cost(self, nbytes: int) -> float:
        return nbytes * self.per_byte

    def post(self, msg: Message) -> None:
        msg.seq = next(self._seq)
        msg.delivered = msg.sent + msg.xfer + self.latency
        heapq.heappush(self._heap, (msg.delivered, msg.dst, msg.seq, _DELIVER, msg))

    def wait(self, rank: int, match: Callable[[Message], bool], deadline: float | None = None,
             why: str = "") -> Message | None:
        if self._abort:
            raise Aborted()
        box = self._boxes[rank]
        for i, m in enumerate(box):
            if match(m):
                del box[i]
                return m
        if deadline is not None and deadline <= self.now:
            return None
        token = next(self._tokens)
        self._waiting[rank] = (match, token, why)
        if deadline is not None:
            heapq.heappush(self._heap, (deadline, rank, next(self._seq), _TIMER, token))
        self._back.release()
        self._resume[rank].acquire()
        if self._abort:
            raise Aborted()
        return self._result.pop(rank)

    # -- scheduler -----------------------------------------------------------

    def _switch(self, rank: int) -> None:
        self._resume[rank].release()
        self._back.acquire()

    def _worker(self, rank: int, body: Callable[[], None]) -> None:
        self._resume[rank].acquire()
        try:
            if not self._abort:
                body()
        except Aborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - reported to the driver
            self.errors[rank] = exc
        finally:
            self.done[rank] = True
            self._waiting.pop(rank, None)
            self._back.release()

    def run(self, bodies: list[Callable[[], None]]) -> None:
        threads = [threading.Thread(target=self._worker, args=(r, b), daemon=True,
                                    name=f"rank-{r}") for r, b in enumerate(bodies)]
        for t in threads:
            t.start()
        for r in range(self.nranks):
            heapq.heappush(self._heap, (0.0, r, next(self._seq), _START, None))
        try:
            while self._heap:
                t, rank, _, kind, payload = heapq.heappop(self._heap)
                self.now = t
                if kind == _START:
                    self._started[rank] = True
                    self._switch(rank)
                elif kind == _TIMER:
                    w = self._waiting.get(rank)
                    if w is not None and w[1] == payload:
                        del self._waiting[rank]
                        self._result[rank] = None
                        self._switch(rank)
                else:
                    w = self._waiting.get(rank)
                    if w is not None and w[0](payload):
                        del self._waiting[rank]
                        self._result[rank] = payload
                        self._switch(rank)
                    else:
                        self._boxes[rank].append(payload)
                if self.errors:
                    break
            if not self.errors and not all(self.done):
                blocked = [(r, self._waiting[r][2] or "waiting") for r in sorted(self._waiting)]
                raise DeadlockError(blocked)
        finally:
            self._teardown(threads)

    def _teardown(self, threads) -> None:
        self._abort = True
        for r in range(self.nranks):
            if not self.done[r]:
                self._switch(r)
        for t in threads:
            t.join(timeout=5)


class RealFabric(_Base):
    """Wall-clock fabric. One duration unit lasts ``unit`` seconds."""

    virtual = False

    def __init__(self, nranks: int, unit: float = 0.001, timeout: float | None = 60.0):
        super().__init__(nranks)
        self.unit = unit
        self.timeout = timeout
        self._t0 = time.perf_counter()
        self._seq = itertools.count()
        self._lock = threading.Lock()
        self._conds = [threading.Condition() for _ in range(nranks)]
        self._boxes: list[list[Message]] = [[] for _ in range(nranks)]
        self._waiting: dict[int, str] = {}

    def time(self) -> float:
        return (time.perf_counter() - self._t0) / self.unit

    def post(self, msg: Message) -> None:
        with self._lock:
            msg.seq = next(self._seq)
        msg.delivered = msg.sent
        cond = self._conds[msg.dst]
        with cond:
            self._boxes[msg.dst].append(msg)
            cond.notify_all()

    def wait(self, rank, match, deadline=None, why=""):
        cond = self._conds[rank]
        box = self._boxes[rank]
        with cond:
            while True:
                if self._abort:
                    raise Aborted()
                for i, m in enumerate(box):
                    if match(m):
                        del box[i]
                        return m
                if deadline is None:
                    timeout = 0.25
                else:
                    timeout = (deadline - self.time()) * self.unit
                    if timeout <= 0:
                        return None
                self._waiting[rank] = why
                cond.wait(min(timeout, 0.25))
                self._waiting.pop(rank, None)

    def _worker(self, rank, body):
        try:
            body()
        except Aborted:
            pass
        except BaseException as exc:  # noqa: BLE001
            self.errors[rank] = exc
            self._stop()
        finally:
            self.done[rank] = True

    def _stop(self):
        self._abort = True
        for c in self._conds:
            with c:
                c.notify_all()

    def run(self, bodies):
        threads = [threading.Thread(target=self._worker, args=(r, b), daemon=True,
                                    name=f"rank-{r}") for r, b in enumerate(bodies)]
        for t in threads:
            t.start()
        end = None if self.timeout is None else time.perf_counter() + self.timeout
        for t in threads:
            remaining = None if end is None else max(0.0, end - time.perf_counter())
            t.join(remaining)
            if t.is_alive():
                blocked = sorted(self._waiting.items())
                self._stop()
                for u in threads:
                    u.join(timeout=5)
                raise WorkflowError(f"real-clock run exceeded {self.timeout}s; blocked: {blocked}")
