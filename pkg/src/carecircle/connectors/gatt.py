"""Heart Rate Measurement characteristic (0x2A37) frames.

Flags byte: bit 0 selects a UINT16 little-endian rate over UINT8, bit 3 marks
energy expended (UINT16), bit 4 marks trailing RR intervals (UINT16, 1/1024 s).
"""
from __future__ import annotations

from .base import ConnectorError, RawSample

MIN_BPM = 20
MAX_BPM = 300


class GattError(ConnectorError, ValueError):
    pass


def parse_gatt_heart_rate(data: bytes, source_id: str = "ble", device_ts: float = 0.0,
                          tz_offset_minutes: int = 0) -> RawSample:
    data = bytes(data)
    if len(data) < 2:
        raise GattError("truncated heart-rate frame")
    flags = data[0]
    offset = 1
    if flags & 0x01:
        if len(data) < 3:
            raise GattError("truncated heart-rate frame (16-bit value)")
        bpm = int.from_bytes(data[1:3], "little")
        offset = 3
    else:
        bpm = data[1]
        offset = 2
    if flags & 0x08:
        if len(data) < offset + 2:
            raise GattError("truncated heart-rate frame (energy expended)")
        offset += 2
    rr_ms = []
    if flags & 0x10:
        while len(data) >= offset + 2:
            rr_ms.append(int.from_bytes(data[offset:offset + 2], "little") * 1000.0 / 1024.0)
            offset += 2
    if not MIN_BPM <= bpm <= MAX_BPM:
        raise GattError(f"heart rate {bpm} bpm outside [{MIN_BPM}, {MAX_BPM}]")
    return RawSample(
        source_id=source_id,
        metric="heart_rate",
        value=float(bpm),
        unit="bpm",
        device_ts=device_ts,
        payload=data,
        tz_offset_minutes=tz_offset_minutes,
        meta={"rr_ms": rr_ms, "sampling": "ble_gatt_notify"},
    )
