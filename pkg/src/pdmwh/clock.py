"""Injectable clocks. Everything that stamps a time takes one of these, so
tests and the CLI's --clock flag can pin the current instant."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone


def utc_second(dt: datetime) -> datetime:
    """Normalize to tz-aware UTC, whole seconds (the stored precision)."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).replace(microsecond=0)


class SystemClock:
    def now(self) -> datetime:
        return utc_second(datetime.now(timezone.utc))


class ManualClock:
    """Fixed clock for deterministic runs; advance() moves it forward."""

    def __init__(self, start: datetime):
        self._now = utc_second(start)

    def now(self) -> datetime:
        return self._now

    def advance(self, seconds: float = 0, *, delta: timedelta | None = None) -> datetime:
        self._now = utc_second(self._now + (delta or timedelta(seconds=seconds)))
        return self._now

    def set(self, dt: datetime) -> None:
        self._now = utc_second(dt)


def parse_instant(text: str) -> datetime:
    """Parse an ISO-8601 instant; bare dates mean midnight UTC."""
    return utc_second(datetime.fromisoformat(text.replace("Z", "+00:00")))
