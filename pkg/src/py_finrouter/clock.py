from contextlib import contextmanager
from datetime import date, datetime, timedelta, timezone
from threading import Lock
from time import monotonic
from typing import Iterator


class SystemClock:
    """Wall clock for live runs."""

    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def monotonic(self) -> float:
        return monotonic()

    @contextmanager
    def suspended(self) -> Iterator[None]:
        yield


class FrozenClock:
    """A clock that advances by a fixed step on every reading.

    Offline runs use it so that timestamps and latencies written into
    artifacts are reproducible byte for byte.
    """

    def __init__(self, start: datetime, step: timedelta = timedelta(seconds=1)):
        if start.tzinfo is None:
            start = start.replace(tzinfo=timezone.utc)
        self.start = start
        self.step = step
        self._ticks = 0
        self._lock = Lock()

    @classmethod
    def at(cls, day: date) -> "FrozenClock":
        return cls(datetime(day.year, day.month, day.day, tzinfo=timezone.utc))

    def _tick(self) -> int:
        with self._lock:
            ticks = self._ticks
            self._ticks += 1
        return ticks

    def now(self) -> datetime:
        return self.start + self.step * self._tick()

    def monotonic(self) -> float:
        return self._tick() * self.step.total_seconds()

    @contextmanager
    def suspended(self) -> Iterator[None]:
        """Readings inside the block leave no trace on later readings."""
        with self._lock:
            ticks = self._ticks
        try:
            yield
        finally:
            with self._lock:
                self._ticks = ticks
