"""Single-threaded cooperative task executor.

Every commshim process runs exactly one :class:`TaskLoop`.  Tasks are plain
``async def`` coroutines; suspension points are :func:`sleep`, :class:`Future`
and :class:`Event`.  The loop owns the clock: a :class:`VirtualClock` counts
integer ticks (1 tick is nominally one nanosecond) and jumps forward when
every task is parked on a timer, which makes simulated runs deterministic and
instant in wall time; a :class:`MonotonicClock` is used for real multi-process
runs.

One pass over the ready queue is an executor *round* (the tick budget unit
used by deadlock tests).  Scheduling is strict FIFO, so identical programs
replay identically.
"""

from __future__ import annotations

import heapq
import time
from collections import deque
from collections.abc import Awaitable, Coroutine
from typing import Any, Callable

from .errors import CommShimError

__all__ = [
    "Cancelled",
    "DeadlockError",
    "Event",
    "Future",
    "MonotonicClock",
    "RoundBudgetExceeded",
    "Task",
    "TaskLoop",
    "VirtualClock",
    "WaitTimeout",
    "current_loop",
    "gather",
    "sleep",
    "wait_for",
]

TICKS_PER_SECOND = 1_000_000_000


class Cancelled(BaseException):
    """Thrown into a task by :meth:`Task.cancel`; deliberately not an Exception."""


class DeadlockError(CommShimError):
    """No task is runnable and no timer is pending: the program is stuck."""


class RoundBudgetExceeded(CommShimError):
    """The loop ran past its configured round budget."""


class WaitTimeout(CommShimError):
    """:func:`wait_for` gave up before its awaitable finished."""


class VirtualClock:
    """Integer tick counter; only ever moves forward."""

    def __init__(self, start: int = 0):
        self._now = start

    @property
    def virtual(self) -> bool:
        return True

    def now(self) -> int:
        return self._now

    def advance_to(self, when: int) -> None:
        if when > self._now:
            self._now = when

    def idle_until(self, when) -> None:
        self.advance_to(int(when))

    def from_seconds(self, seconds: float) -> int:
        return round(seconds * TICKS_PER_SECOND)

    def to_seconds(self, stamp) -> float:
        return stamp / TICKS_PER_SECOND


class MonotonicClock:
    """Wall-clock time in float seconds, for socket-transport processes."""

    @property
    def virtual(self) -> bool:
        return False

    def now(self) -> float:
        return time.monotonic()

    def idle_until(self, when) -> None:
        delay = when - time.monotonic()
        if delay > 0:
            time.sleep(delay)

    def from_seconds(self, seconds: float) -> float:
        return seconds

    def to_seconds(self, stamp) -> float:
        return float(stamp)


class Future:
    """One-shot container a task can await; resolving it wakes the waiters."""

    __slots__ = ("_state", "_value", "_exc", "_callbacks")

    _PENDING, _DONE = 0, 1

    def __init__(self):
        self._state = Future._PENDING
        self._value: Any = None
        self._exc: BaseException | None = None
        self._callbacks: list[Callable[[Future], None]] = []

    def done(self) -> bool:
        return self._state == Future._DONE

    def result(self) -> Any:
        if self._state != Future._DONE:
            raise RuntimeError("future is not done")
        if self._exc is not None:
            raise self._exc
        return self._value

    def exception(self) -> BaseException | None:
        if self._state != Future._DONE:
            raise RuntimeError("future is not done")
        return self._exc

    def set_result(self, value: Any = None) -> None:
        if self._state == Future._DONE:
            return
        self._state = Future._DONE
        self._value = value
        self._run_callbacks()

    def set_exception(self, exc: BaseException) -> None:
        if self._state == Future._DONE:
            return
        self._state = Future._DONE
        self._exc = exc
        self._run_callbacks()

    def add_done_callback(self, fn: Callable[[Future], None]) -> None:
        if self._state == Future._DONE:
            fn(self)
        else:
            self._callbacks.append(fn)

    def remove_done_callback(self, fn: Callable[[Future], None]) -> None:
        try:
            self._callbacks.remove(fn)
        except ValueError:
            pass

    def _run_callbacks(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)

    def __await__(self):
        if self._state != Future._DONE:
            yield self
        if self._exc is not None:
            raise self._exc
        return self._value


class _Yield:
    """Awaitable that parks the task for exactly one round (``sleep(0)``)."""

    def __await__(self):
        yield self


class Task(Future):
    """A scheduled coroutine.  Completes with its return value or exception."""

    __slots__ = ("coro", "loop", "name", "_waiting_on", "_cancel_requested")

    def __init__(self, coro: Coroutine, loop: "TaskLoop", name: str | None = None):
        super().__init__()
        self.coro = coro
        self.loop = loop
        self.name = name or getattr(coro, "__name__", "task")
        self._waiting_on: Future | None = None
        self._cancel_requested = False

    def cancel(self) -> bool:
        """Throw :class:`Cancelled` into the coroutine at its next resume point."""
        if self.done():
            return False
        if self._cancel_requested:
            return True
        self._cancel_requested = True
        if self._waiting_on is not None:
            self._waiting_on.remove_done_callback(self._wake)
            self._waiting_on = None
            self.loop._schedule(self, exc=Cancelled())
        # If currently queued, the pending _step will observe the flag.
        return True

    def cancelled(self) -> bool:
        return self.done() and isinstance(self._exc, Cancelled)

    def _wake(self, fut: Future) -> None:
        self._waiting_on = None
        if fut._exc is not None:
            self.loop._schedule(self, exc=fut._exc)
        else:
            self.loop._schedule(self, value=fut._value)

    def _step(self, value: Any, exc: BaseException | None) -> None:
        if self.done():
            return
        if self._cancel_requested and not isinstance(exc, Cancelled):
            exc = Cancelled()
        try:
            if exc is not None:
                yielded = self.coro.throw(exc)
            else:
                yielded = self.coro.send(value)
        except StopIteration as stop:
            self.set_result(stop.value)
            return
        except Cancelled as c:
            self.set_exception(c)
            return
        except BaseException as e:
            self.set_exception(e)
            return

        if isinstance(yielded, _Yield):
            self.loop._schedule(self)
        elif isinstance(yielded, Future):
            self._waiting_on = yielded
            yielded.add_done_callback(self._wake)
        else:  # pragma: no cover - misuse guard
            self.loop._schedule(self, exc=RuntimeError(f"task yielded {yielded!r}"))

    def __repr__(self):
        state = "done" if self.done() else "pending"
        return f"<Task {self.name} {state}>"


_current_loop: "TaskLoop | None" = None


def current_loop() -> "TaskLoop":
    if _current_loop is None:
        raise RuntimeError("no TaskLoop is running")
    return _current_loop


class TaskLoop:
    """FIFO round-based scheduler over a virtual or monotonic clock."""

    def __init__(self, clock: VirtualClock | MonotonicClock | None = None):
        self.clock = clock if clock is not None else VirtualClock()
        self.rounds = 0
        self._ready: deque[tuple[Task, Any, BaseException | None]] = deque()
        self._timers: list[tuple[Any, int, Future, Any]] = []
        self._timer_seq = 0
        self._tasks: set[Task] = set()

    # -- task plumbing -----------------------------------------------------

    def create_task(self, coro: Coroutine, name: str | None = None) -> Task:
        task = Task(coro, self, name)
        self._tasks.add(task)
        task.add_done_callback(lambda _t: self._tasks.discard(task))
        self._schedule(task)
        return task

    def create_future(self) -> Future:
        return Future()

    def _schedule(self, task: Task, value: Any = None, exc: BaseException | None = None) -> None:
        self._ready.append((task, value, exc))

    def call_at(self, when, future: Future, value: Any = None) -> None:
        """Resolve ``future`` with ``value`` once the clock reaches ``when``."""
        self._timer_seq += 1
        heapq.heappush(self._timers, (when, self._timer_seq, future, value))

    # -- driving -----------------------------------------------------------

    def run_until_complete(self, main: Coroutine | Task, *, max_rounds: int | None = None) -> Any:
        global _current_loop
        if _current_loop is not None:
            raise RuntimeError("a TaskLoop is already running in this thread")
        task = main if isinstance(main, Task) else self.create_task(main, name="main")
        _current_loop = self
        try:
            while not task.done():
                self._run_round()
                if max_rounds is not None and self.rounds > max_rounds:
                    raise RoundBudgetExceeded(
                        f"main task still pending after {max_rounds} rounds"
                    )
        finally:
            _current_loop = None
        return task.result()

    def _fire_timers(self) -> bool:
        fired = False
        now = self.clock.now()
        while self._timers and self._timers[0][0] <= now:
            _, _, fut, value = heapq.heappop(self._timers)
            if not fut.done():
                fut.set_result(value)
                fired = True
        return fired

    def _run_round(self) -> None:
        self.rounds += 1
        self._fire_timers()
        if not self._ready:
            # Drop timers whose future was resolved elsewhere.
            while self._timers and self._timers[0][2].done():
                heapq.heappop(self._timers)
            if self._timers:
                self.clock.idle_until(self._timers[0][0])
                self._fire_timers()
            else:
                stuck = sorted(t.name for t in self._tasks if not t.done())
                raise DeadlockError(
                    "all tasks are blocked with no timer pending; stuck tasks: "
                    + (", ".join(stuck) or "<none>")
                )
        for _ in range(len(self._ready)):
            task, value, exc = self._ready.popleft()
            task._step(value, exc)


# -- awaitable helpers -----------------------------------------------------


async def sleep(delay) -> None:
    """Suspend for ``delay`` clock units (0 parks for exactly one round)."""
    if delay <= 0:
        await _Yield()
        return
    loop = current_loop()
    fut = loop.create_future()
    loop.call_at(loop.clock.now() + delay, fut)
    await fut


class Event:
    """Level-triggered flag; ``wait`` suspends until someone calls ``set``."""

    def __init__(self):
        self._set = False
        self._waiters: list[Future] = []

    def is_set(self) -> bool:
        return self._set

    def set(self) -> None:
        self._set = True
        waiters, self._waiters = self._waiters, []
        for fut in waiters:
            fut.set_result(None)

    def clear(self) -> None:
        self._set = False

    async def wait(self) -> None:
        if self._set:
            return
        fut = current_loop().create_future()
        self._waiters.append(fut)
        await fut


def _ensure_task(aw: Awaitable) -> Task:
    if isinstance(aw, Task):
        return aw
    return current_loop().create_task(aw)  # type: ignore[arg-type]


async def gather(*awaitables: Awaitable) -> list:
    """Run awaitables concurrently; return their results in argument order."""
    tasks = [_ensure_task(aw) for aw in awaitables]
    return [await t for t in tasks]


async def wait_for(awaitable: Awaitable, timeout) -> Any:
    """Await with a deadline; cancels the work and raises WaitTimeout on expiry."""
    loop = current_loop()
    task = _ensure_task(awaitable)
    if timeout is None:
        return await task
    done = loop.create_future()
    sentinel = object()
    loop.call_at(loop.clock.now() + timeout, done, sentinel)
    task.add_done_callback(lambda _t: done.set_result(None) if not done.done() else None)
    marker = await done
    if marker is sentinel and not task.done():
        task.cancel()
        raise WaitTimeout(f"operation did not finish within {timeout} clock units")
    return task.result()
