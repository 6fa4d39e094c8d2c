"""Wall and virtual clocks behind one interface.

The gateway sleeps only through a Clock, so rate-limit and retry behavior
is testable on a VirtualClock that advances simulated time instantly and
deterministically, including across the gateway's worker threads.
"""

from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...

    def register_worker(self) -> None: ...

    def unregister_worker(self) -> None: ...


class WallClock:
    """Monotonic real time; worker registration is a no-op."""

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def register_worker(self) -> None:
        pass

    def unregister_worker(self) -> None:
        pass


class VirtualClock:
    """Deterministic simulated time shared by cooperating threads.

    Threads doing gateway work register as workers. Time advances only
    when every registered worker is blocked in sleep(); it then jumps to
    the earliest wake deadline. A sleeper on an unregistered thread (e.g.
    a bare dispatch call) advances time immediately when no workers are
    runnable. Simulated timestamps are therefore independent of OS
    scheduling.
    """

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._cond = threading.Condition()
        self._workers: set[int] = set()
        self._sleepers: dict[int, float] = {}

    def now(self) -> float:
        with self._cond:
            return self._now

    def register_worker(self) -> None:
        with self._cond:
            self._workers.add(threading.get_ident())

    def unregister_worker(self) -> None:
        with self._cond:
            self._workers.discard(threading.get_ident())
            self._maybe_advance_locked()

    def sleep(self, seconds: float) -> None:
        if seconds <= 0:
            return
        ident = threading.get_ident()
        with self._cond:
            wake = self._now + seconds
            self._sleepers[ident] = wake
            self._maybe_advance_locked()
            while self._now < wake:
                self._cond.wait()
            del self._sleepers[ident]
            self._cond.notify_all()

    def _maybe_advance_locked(self) -> None:
        # Advance only when no registered worker is runnable.
        if not self._sleepers:
            return
        runnable = self._workers - set(self._sleepers)
        if runnable:
            return
        self._now = min(self._sleepers.values())
        self._cond.notify_all()
