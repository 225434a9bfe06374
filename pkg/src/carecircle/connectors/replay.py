"""Vendor-trace replay: a scripted vendor feed, a data-driven adapter, and a sync loop
with delta polling, retries and token refresh."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .._time import parse_iso, to_utc
from ..ontology import OntologySchema, load_default_ontology
from .base import ConnectorError, ProfileEvent, RawSample
from .capture import CaptureConfig, PipelineReport, run_capture_pipeline
from .timealign import ClockAligner


CANONICAL_METRICS = (
    "heart_rate", "resting_heart_rate", "hrv_rmssd", "spo2", "respiratory_rate",
    "skin_temperature", "systolic_bp", "diastolic_bp", "steps", "distance",
    "active_minutes", "calories", "sleep_duration", "sleep_efficiency", "weight",
    "stress_score",
)
MODES = frozenset({"sdk", "cloud_oauth", "ble"})
FAULTS = frozenset({"dropout", "rate_limit", "partial", "skew", "auth_expired"})


class TraceError(ConnectorError):
    pass


class AdapterMissing(ConnectorError):
    pass


@dataclass(frozen=True)
class VendorTrace:
    vendor: str
    mode: str
    records: tuple[Mapping[str, Any], ...]
    expected_metrics: tuple[str, ...] = CANONICAL_METRICS

    def __post_init__(self):
        if self.mode not in MODES:
            raise TraceError(f"unknown integration mode {self.mode!r}")
        prev = None
        for i, rec in enumerate(self.records):
            if "t" not in rec or "metric" not in rec:
                raise TraceError(f"record {i} lacks t or metric")
            fault = rec.get("fault")
            if fault is not None and fault not in FAULTS:
                raise TraceError(f"record {i}: unknown fault {fault!r}")
            t = to_utc(rec["t"]) if rec.get("fault") != "skew" else None
            if t is not None:
                if prev is not None and t < prev:
                    raise TraceError(f"record {i} is out of device-time order")
                prev = t


def load_trace(source: str | Path) -> VendorTrace:
    """Read a JSON-lines trace. An optional first line carries the header."""
    if isinstance(source, Path) or ("\n" not in source and Path(source).is_file()):
        text = Path(source).read_text("utf-8")
    else:
        text = source
    header: dict = {}
    records = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"line {n}: {exc.msg}") from None
        if n == 1 and "vendor" in obj and "metric" not in obj:
            header = obj
        else:
            records.append(obj)
    if not header:
        raise TraceError("trace lacks a vendor header line")
    return VendorTrace(
        vendor=header["vendor"],
        mode=header.get("mode", "cloud_oauth"),
        records=tuple(records),
        expected_metrics=tuple(header.get("expected_metrics", CANONICAL_METRICS)),
    )


def dump_trace(trace: VendorTrace) -> str:
    lines = [json.dumps({"vendor": trace.vendor, "mode": trace.mode,
                         "expected_metrics": list(trace.expected_metrics)}, sort_keys=True)]
    lines += [json.dumps(dict(r), sort_keys=True) for r in trace.records]
    return "\n".join(lines) + "\n"


def packaged_traces() -> list[str]:
    root = resources.files("carecircle.data").joinpath("traces")
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".jsonl"))


def load_packaged_trace(name: str) -> VendorTrace:
    text = resources.files("carecircle.data").joinpath("traces", name).read_text("utf-8")
    return load_trace(text)


@dataclass
class VendorAdapter:
    """Mapping table from vendor field names and units to canonical metrics."""

    vendor: str
    modes: frozenset[str]
    fields: Mapping[str, tuple[str, str]]  # vendor field -> (canonical metric, default unit)
    page_size: int = 500
    max_retries: int = 5

    @classmethod
    def from_json(cls, data: Mapping) -> "VendorAdapter":
        return cls(
            vendor=data["vendor"],
            modes=frozenset(data["modes"]),
            fields={k: (v["metric"], v["unit"]) for k, v in data["fields"].items()},
            page_size=int(data.get("page_size", 500)),
        )

    @classmethod
    def load(cls, vendor: str) -> "VendorAdapter":
        text = resources.files("carecircle.data").joinpath("vendors", f"{vendor}.json").read_text("utf-8")
        return cls.from_json(json.loads(text))

    def to_json(self) -> dict:
        return {
            "vendor": self.vendor,
            "modes": sorted(self.modes),
            "fields": {k: {"metric": m, "unit": u} for k, (m, u) in sorted(self.fields.items())},
            "page_size": self.page_size,
        }

    def to_sample(self, rec: Mapping[str, Any]) -> RawSample | None:
        """None when the record carries no usable value (a partial record)."""
        value = rec.get("value")
        if value is None or isinstance(value, bool) or not isinstance(value, (int, float)):
            return None
        mapped = self.fields.get(rec["metric"])
        metric, unit = mapped if mapped else (f"vendor:{rec['metric']}", "")
        unit = rec.get("unit") or unit
        wall, tz = parse_iso(rec["t"])
        meta: dict[str, Any] = {"sampling": f"{self.vendor}:sync"}
        if rec.get("device_id"):
            meta["device_id"] = rec["device_id"]
        if rec.get("firmware"):
            meta["firmware"] = rec["firmware"]
        return RawSample(
            source_id=rec.get("device_id") or f"{self.vendor}:derived",
            metric=metric,
            value=float(value),
            unit=unit,
            device_ts=wall,
            tz_offset_minutes=tz,
            server_ts=to_utc(rec["server_t"]) if rec.get("server_t") else None,
            meta=meta,
        )


class RateLimited(ConnectorError):
    def __init__(self, retry_after: float):
        self.retry_after = retry_after
        super().__init__(f"rate limited; retry after {retry_after}s")


class TokenExpired(ConnectorError):
    pass


def _sync_time(rec: Mapping[str, Any]) -> float:
    return to_utc(rec["server_t"]) if rec.get("server_t") else to_utc(rec["t"])


class TraceServer:
    """The vendor side of a trace. Each scripted fault fires once, the first time a
    page would reach the record carrying it."""

    def __init__(self, trace: VendorTrace):
        order = sorted(range(len(trace.records)), key=lambda i: (_sync_time(trace.records[i]), i))
        self.records = [(i, _sync_time(trace.records[i]), trace.records[i]) for i in order]
        self.fired: set[int] = set()
        self.token_version = 0

    def issue_token(self) -> str:
        self.token_version += 1
        return f"tok-{self.token_version}"

    def fetch(self, since: float, limit: int, token: str) -> tuple[list[tuple[int, float, Mapping]], bool]:
        """Records with sync time >= ``since``. Returns (page, dropped)."""
        if token != f"tok-{self.token_version}":
            raise TokenExpired("stale token")
        page = []
        for idx, t, rec in self.records:
            if t < since:
                continue
            if len(page) >= limit:
                break
            fault = rec.get("fault")
            if idx not in self.fired:
                if fault == "rate_limit":
                    self.fired.add(idx)
                    raise RateLimited(1.0)
                if fault == "auth_expired":
                    self.fired.add(idx)
                    self.token_version += 1
                    raise TokenExpired("token expired")
                if fault == "dropout":
                    self.fired.add(idx)
                    return page, True
            page.append((idx, t, rec))
        return page, False


@dataclass
class IngestReport:
    vendor: str
    mode: str
    metrics_expected: int
    metrics_synced: int
    pass_rate: float | None
    faults_recovered: dict[str, int] = field(default_factory=dict)
    synced_metrics: list[str] = field(default_factory=list)
    missing_metrics: list[str] = field(default_factory=list)
    n_records: int = 0
    partial_dropped: int = 0
    overlap_skipped: int = 0
    derived_events: int = 0
    event_ids: list[str] = field(default_factory=list)
    pipeline: PipelineReport = field(default_factory=PipelineReport)
    skipped: bool = False

    def to_json(self) -> dict:
        return {
            "vendor": self.vendor,
            "mode": self.mode,
            "metrics_expected": self.metrics_expected,
            "metrics_synced": self.metrics_synced,
            "pass_rate": self.pass_rate,
            "faults_recovered": dict(sorted(self.faults_recovered.items())),
            "synced_metrics": self.synced_metrics,
            "missing_metrics": self.missing_metrics,
            "records": self.n_records,
            "partial_dropped": self.partial_dropped,
            "overlap_skipped": self.overlap_skipped,
            "derived_events": self.derived_events,
            "events": len(self.event_ids),
            "pipeline": self.pipeline.to_json(),
            "skipped": self.skipped,
        }


def replay_trace(
    trace: VendorTrace,
    adapter: VendorAdapter | None,
    store=None,
    schema: OntologySchema | None = None,
) -> tuple[IngestReport, list[ProfileEvent]]:
    """Link, bootstrap and sync a trace through ``adapter``; optionally persist to ``store``.

    Sync resumes from the last-sync time after every dropout. The resume fetch
    overlaps the last delivered instant, and overlapping records are skipped by
    record index, so each record is ingested exactly once.
    """
    if adapter is None or trace.mode not in adapter.modes:
        raise AdapterMissing(f"no adapter registered for {trace.vendor}/{trace.mode}")
    schema = schema or load_default_ontology()
    expected = list(trace.expected_metrics)
    if not trace.records:
        return IngestReport(trace.vendor, trace.mode, len(expected), 0, None, skipped=True), []

    server = TraceServer(trace)
    token = server.issue_token()  # account linking
    recovered: Counter = Counter()
    seen: set[int] = set()
    samples: list[RawSample] = []
    report = IngestReport(trace.vendor, trace.mode, len(expected), 0, None, n_records=len(trace.records))
    last_sync = float("-inf")
    retries = 0
    pending_gap = False
    while True:
        try:
            page, dropped = server.fetch(last_sync, adapter.page_size, token)
        except RateLimited:
            retries += 1
            if retries > adapter.max_retries:
                raise
            recovered["rate_limit"] += 1
            continue
        except TokenExpired:
            retries += 1
            if retries > adapter.max_retries:
                raise
            token = server.issue_token()
            recovered["auth_expired"] += 1
            continue
        retries = 0
        fresh = [(i, t, r) for i, t, r in page if i not in seen]
        report.overlap_skipped += len(page) - len(fresh)
        for idx, t, rec in fresh:
            seen.add(idx)
            sample = adapter.to_sample(rec)
            if sample is None:
                report.partial_dropped += 1
                if rec.get("fault") == "partial":
                    recovered["partial"] += 1
                continue
            if rec.get("fault") == "partial":
                recovered["partial"] += 1
            elif rec.get("fault") == "skew":
                recovered["skew"] += 1
            samples.append(sample)
        if page:
            last_sync = max(last_sync, max(t for _, t, _ in page))
        if pending_gap and (fresh or not dropped):
            recovered["dropout"] += 1
            pending_gap = False
        if dropped:
            pending_gap = True
            continue
        if not fresh:
            if len(page) >= adapter.page_size:
                raise TraceError("page size too small to make progress")
            break

    paths = {m: f"VitalSign.{m}" for m in CANONICAL_METRICS}
    pull_ts = max(t for _, t, _ in server.records)
    events, prep = run_capture_pipeline(
        samples, schema, CaptureConfig(metric_paths=paths, pull_ts=pull_ts),
        ClockAligner(),
    )
    report.pipeline = prep
    report.faults_recovered = dict(recovered)
    synced = {_metric_of(e) for e in events}
    report.synced_metrics = [m for m in expected if m in synced]
    report.missing_metrics = [m for m in expected if m not in synced]
    report.metrics_synced = len(report.synced_metrics)
    report.pass_rate = report.metrics_synced / len(expected) if expected else None
    report.derived_events = sum(1 for e in events if e.provenance.derived)
    report.event_ids = [e.id for e in events]
    if store is not None:
        store.ingest_many(events)
    return report, events


def _metric_of(event: ProfileEvent) -> str:
    return next(k for k in event.event.fields if k != "ts")
