"""Capture pipeline: map -> convert -> align -> noise filter -> spike repair -> ontology.

Every input sample lands in exactly one bucket of the report
(filtered, converted, spikes, rejected), so the counts always sum to the input.
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..ontology import OntologySchema, Quantity, UnitError, ValidationError, convert_unit, validate_event
from .base import ProfileEvent, Provenance, RawSample, default_metric_paths
from .timealign import DEFAULT_SKEW_BOUND, ClockAligner

MAD_SCALE = 1.4826

DEFAULT_MAD_FLOOR = {
    "heart_rate": 3.0,
    "resting_heart_rate": 3.0,
    "spo2": 1.0,
    "systolic_bp": 5.0,
    "diastolic_bp": 4.0,
    "respiratory_rate": 1.5,
    "skin_temperature": 0.3,
}

# canonical units
DEFAULT_PLAUSIBLE = {
    "heart_rate": (20.0, 300.0),
    "resting_heart_rate": (20.0, 200.0),
    "hrv_rmssd": (0.0, 500.0),
    "spo2": (50.0, 100.0),
    "respiratory_rate": (2.0, 80.0),
    "skin_temperature": (20.0, 45.0),
    "systolic_bp": (50.0, 260.0),
    "diastolic_bp": (30.0, 160.0),
    "steps": (0.0, 40000.0),
    "distance": (0.0, 300000.0),
    "active_minutes": (0.0, 1440.0),
    "calories": (0.0, 20000.0),
    "sleep_duration": (0.0, 1440.0),
    "sleep_efficiency": (0.0, 100.0),
    "weight": (1.0, 400.0),
    "stress_score": (0.0, 100.0),
}


@dataclass
class CaptureConfig:
    metric_paths: Mapping[str, str] | None = None
    window: int = 5
    z: float = 5.0
    mad_floor: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MAD_FLOOR))
    plausible: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_PLAUSIBLE))
    skew_bound_s: float = DEFAULT_SKEW_BOUND
    ts_resolution: float = 1.0
    sampling_method: str = "periodic"
    pull_ts: float | None = None  # stands in for server receipt when a sample has none

    @property
    def spike_metrics(self) -> frozenset[str]:
        return frozenset(self.mad_floor)


@dataclass
class PipelineReport:
    n_input: int = 0
    filtered: int = 0
    converted: int = 0
    spikes: int = 0
    rejected: int = 0
    reasons: Counter = field(default_factory=Counter)
    quarantined: list[RawSample] = field(default_factory=list)
    spike_event_ids: list[str] = field(default_factory=list)

    def conserved(self) -> bool:
        return self.filtered + self.converted + self.spikes + self.rejected == self.n_input

    def merge(self, other: "PipelineReport") -> None:
        self.n_input += other.n_input
        self.filtered += other.filtered
        self.converted += other.converted
        self.spikes += other.spikes
        self.rejected += other.rejected
        self.reasons.update(other.reasons)
        self.quarantined.extend(other.quarantined)
        self.spike_event_ids.extend(other.spike_event_ids)

    def to_json(self) -> dict:
        return {
            "input": self.n_input, "filtered": self.filtered, "converted": self.converted,
            "spikes": self.spikes, "rejected": self.rejected,
            "reasons": dict(sorted(self.reasons.items())), "quarantined": len(self.quarantined),
        }


def hampel_flags(values: np.ndarray, window: int, z: float, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Spike mask and rolling median for a centred window (truncated at the edges)."""
    n = len(values)
    h = window // 2
    padded = np.full(n + 2 * h, np.nan)
    padded[h:h + n] = values
    win = sliding_window_view(padded, 2 * h + 1)
    med = np.nanmedian(win, axis=1)
    mad = np.nanmedian(np.abs(win - med[:, None]), axis=1)
    scale = np.maximum(MAD_SCALE * mad, floor)
    return np.abs(values - med) > z * scale, med


def repair_spikes(ts: np.ndarray, values: np.ndarray, spikes: np.ndarray, med: np.ndarray) -> np.ndarray:
    out = values.astype(float).copy()
    if not spikes.any():
        return out
    good = ~spikes
    if good.any():
        out[spikes] = np.interp(ts[spikes], ts[good], values[good])
    else:
        out[spikes] = med[spikes]
    return out


def run_capture_pipeline(
    buffer: Sequence[RawSample],
    schema: OntologySchema,
    config: CaptureConfig | None = None,
    aligner: ClockAligner | None = None,
) -> tuple[list[ProfileEvent], PipelineReport]:
    config = config or CaptureConfig()
    paths = dict(config.metric_paths or default_metric_paths(schema))
    report = PipelineReport(n_input=len(buffer))
    aligner = aligner or ClockAligner(config.skew_bound_s)
    for s in buffer:
        if s.server_ts is not None:
            aligner.observe(s.source_id, s.device_ts, s.tz_offset_minutes, s.server_ts)

    def reject(sample: RawSample, reason: str) -> None:
        report.rejected += 1
        report.reasons[reason] += 1

    res = config.ts_resolution
    seen: set[tuple[str, str, float]] = set()
    groups: dict[tuple[str, str], list[tuple[RawSample, str, float, float, float]]] = defaultdict(list)
    for s in buffer:
        path = paths.get(s.metric)
        if path is None or not schema.has_path(path):
            reject(s, "unmapped")
            continue
        fdef = schema.field(path)
        if fdef.kind != "quantity":
            reject(s, "unmapped")
            continue
        try:
            value = convert_unit(s.value, s.unit, fdef.unit)
        except UnitError:
            reject(s, "unit")
            continue
        at = aligner.align(s.source_id, s.device_ts, s.tz_offset_minutes, s.server_ts)
        if at.quarantined:
            reject(s, "quarantined")
            report.quarantined.append(s)
            continue
        ts = round(at.canonical_ts / res) * res
        bounds = config.plausible.get(s.metric)
        if bounds is not None and not bounds[0] <= value <= bounds[1]:
            report.filtered += 1
            report.reasons["out_of_range"] += 1
            continue
        key = (s.source_id, s.metric, ts)
        if key in seen:
            report.filtered += 1
            report.reasons["duplicate"] += 1
            continue
        seen.add(key)
        groups[(s.source_id, s.metric)].append((s, path, value, ts, at.skew_s))

    events: list[ProfileEvent] = []
    for (source, metric), rows in sorted(groups.items()):
        rows.sort(key=lambda r: r[3])
        values = np.array([r[2] for r in rows], dtype=float)
        times = np.array([r[3] for r in rows], dtype=float)
        if metric in config.spike_metrics and len(rows) >= 3:
            spikes, med = hampel_flags(values, config.window, config.z, config.mad_floor[metric])
            repaired = repair_spikes(times, values, spikes, med)
        else:
            spikes = np.zeros(len(rows), dtype=bool)
            repaired = values
        for i, (s, path, value, ts, skew) in enumerate(rows):
            entity, fname = path.split(".", 1)
            fdef = schema.field(path)
            final = float(repaired[i])
            notes = dict(s.meta.get("notes", {}))
            if spikes[i]:
                notes["spike_original"] = value
            if skew:
                notes["skew_s"] = round(skew, 3)
            try:
                typed = validate_event(schema, {fname: Quantity(final, fdef.unit), "ts": ts}, entity)
            except ValidationError:
                reject(s, "validation")
                continue
            device_id = s.meta.get("device_id")
            firmware = s.meta.get("firmware")
            server_ts = s.server_ts if s.server_ts is not None else (
                config.pull_ts if config.pull_ts is not None else ts)
            prov = Provenance(
                source_device_id=device_id or s.source_id,
                firmware_version=firmware or "unknown",
                sampling_method=s.meta.get("sampling", config.sampling_method),
                device_ts=s.device_ts,
                server_ts=server_ts,
                tz_offset_minutes=s.tz_offset_minutes,
                derived=bool(s.meta.get("derived")) or device_id is None or firmware is None,
                notes=notes,
            )
            ev = ProfileEvent(typed, prov, (path, f"{entity}.ts"))
            events.append(ev)
            if spikes[i]:
                report.spikes += 1
                report.spike_event_ids.append(ev.id)
            else:
                report.converted += 1
    return events, report
