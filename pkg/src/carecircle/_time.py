"""Timestamp helpers. Internally every timestamp is float seconds since the UTC epoch."""
from __future__ import annotations

from datetime import datetime, timedelta, timezone

DAY = 86400.0
HOUR = 3600.0
MINUTE = 60.0


def parse_iso(text: str) -> tuple[float, int]:
    """Parse an ISO-8601 string into (wall-clock seconds, tz offset minutes).

    The wall-clock value is the local reading interpreted as if it were UTC,
    which is how device clocks report time. Naive strings and ``Z`` give offset 0.
    """
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    offset = dt.utcoffset() or timedelta(0)
    wall = dt.replace(tzinfo=timezone.utc).timestamp()
    return wall, int(offset.total_seconds() // 60)


def to_utc(text: str) -> float:
    wall, offset = parse_iso(text)
    return wall - offset * 60.0


def format_iso(ts: float, tz_offset_minutes: int = 0) -> str:
    tz = timezone(timedelta(minutes=tz_offset_minutes))
    dt = datetime.fromtimestamp(ts, tz=timezone.utc).astimezone(tz)
    if dt.microsecond == 0:
        return dt.isoformat(timespec="seconds")
    return dt.isoformat(timespec="milliseconds")


def day_index(ts: float) -> int:
    return int(ts // DAY)
