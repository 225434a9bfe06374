"""Device/server clock alignment.

Skew is how far the device clock runs ahead of true UTC, estimated per
session as the median of ``device_ts - tz_offset - server_receipt``.
"""
from __future__ import annotations

import statistics
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

DEFAULT_SKEW_BOUND = 24 * 3600.0


@dataclass(frozen=True)
class AlignedTime:
    canonical_ts: float
    skew_s: float
    quarantined: bool = False
    reason: str = ""


class ClockAligner:
    def __init__(self, bound_s: float = DEFAULT_SKEW_BOUND):
        self.bound_s = bound_s
        self._obs: dict[str, list[float]] = defaultdict(list)
        self._cache: dict[str, float] = {}

    def observe(self, session: str, device_ts: float, tz_offset_minutes: int, server_ts: float) -> None:
        self._obs[session].append(device_ts - tz_offset_minutes * 60.0 - server_ts)
        self._cache.pop(session, None)

    def skew(self, session: str) -> float:
        if session not in self._cache:
            obs = self._obs.get(session)
            self._cache[session] = statistics.median(obs) if obs else 0.0
        return self._cache[session]

    def n_observations(self, session: str) -> int:
        return len(self._obs.get(session, ()))

    def align(self, session: str, device_ts: float, tz_offset_minutes: int,
              server_ts: float | None = None) -> AlignedTime:
        skew = self.skew(session)
        canonical = device_ts - tz_offset_minutes * 60.0 - skew
        if abs(skew) > self.bound_s:
            return AlignedTime(canonical, skew, True, "session skew beyond bound")
        if server_ts is not None:
            own = device_ts - tz_offset_minutes * 60.0 - server_ts
            if abs(own) > self.bound_s:
                return AlignedTime(canonical, skew, True, "sample skew beyond bound")
        return AlignedTime(canonical, skew)


def align_timestamps(sample, server_now: float, tz_offset: int | None = None,
                     aligner: ClockAligner | None = None,
                     bound_s: float = DEFAULT_SKEW_BOUND) -> AlignedTime:
    """Align one sample. Without an aligner, the sample is its own session."""
    tz = sample.tz_offset_minutes if tz_offset is None else tz_offset
    if aligner is None:
        aligner = ClockAligner(bound_s)
        aligner.observe(sample.source_id, sample.device_ts, tz, server_now)
    return aligner.align(sample.source_id, sample.device_ts, tz, server_now)


def align_session(device_ts: Sequence[float], server_ts: Sequence[float], tz_offset: int,
                  bound_s: float = DEFAULT_SKEW_BOUND) -> list[AlignedTime]:
    aligner = ClockAligner(bound_s)
    for d, s in zip(device_ts, server_ts):
        aligner.observe("session", d, tz_offset, s)
    return [aligner.align("session", d, tz_offset, s) for d, s in zip(device_ts, server_ts)]
