"""Simulated clock and event scheduler.

All timestamps in the platform are integer microseconds. Integer time keeps
sliding-window arithmetic exact: a twin paced at precisely 10 updates/s must
never trip the 10/s limit, which float timestamps cannot guarantee.
"""

from __future__ import annotations

import heapq
import itertools
import time
from typing import Callable

US_PER_SECOND = 1_000_000
US_PER_MS = 1_000


def s_to_us(seconds: float) -> int:
    return round(seconds * US_PER_SECOND)


def us_to_s(us: int) -> float:
    return us / US_PER_SECOND


def ms_to_us(ms: float) -> int:
    return round(ms * US_PER_MS)


def us_to_ms(us: int) -> float:
    return us / US_PER_MS


class SimClock:
    """Monotonic simulated clock; advanced explicitly by the driver."""

    mode = "simulated"

    def __init__(self, start_us: int = 0) -> None:
        self._now_us = int(start_us)

    def now_us(self) -> int:
        return self._now_us

    def advance_to(self, t_us: int) -> None:
        if t_us < self._now_us:
            raise ValueError(f"clock cannot move backwards: {t_us} < {self._now_us}")
        self._now_us = t_us

    def advance(self, dt_us: int) -> None:
        if dt_us < 0:
            raise ValueError("dt must be >= 0")
        self._now_us += dt_us


class RealTimeClock:
    """Wall-clock adapter for demo use; reads the process monotonic clock."""

    mode = "real-time"

    def __init__(self) -> None:
        self._origin_ns = time.monotonic_ns()

    def now_us(self) -> int:
        return (time.monotonic_ns() - self._origin_ns) // 1_000

    def advance_to(self, t_us: int) -> None:
        # Real time advances on its own; waiting is the caller's business.
        pass

    def advance(self, dt_us: int) -> None:
        pass


class Scheduler:
    """Deterministic event queue over a SimClock.

    Events scheduled for the same instant run in scheduling order (a
    monotonically increasing sequence number breaks ties), so a run is a pure
    function of (seed, submission order).
    """

    def __init__(self, clock: SimClock) -> None:
        self.clock = clock
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = itertools.count()

    def at(self, t_us: int, fn: Callable[[], None]) -> None:
        if t_us < self.clock.now_us():
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._heap, (t_us, next(self._seq), fn))

    def after(self, dt_us: int, fn: Callable[[], None]) -> None:
        self.at(self.clock.now_us() + dt_us, fn)

    def run_until(self, t_us: int) -> None:
        """Run all events due at or before ``t_us``, then park the clock there."""
        while self._heap and self._heap[0][0] <= t_us:
            due, _, fn = heapq.heappop(self._heap)
            self.clock.advance_to(due)
            fn()
        self.clock.advance_to(t_us)

    def drain(self) -> None:
        """Run every pending event regardless of time."""
        while self._heap:
            due, _, fn = heapq.heappop(self._heap)
            self.clock.advance_to(due)
            fn()

    @property
    def pending(self) -> int:
        return len(self._heap)
