"""Profile store and ETL: ingest, index, enrich, baseline and snapshot.

Derived features (HRV, sleep score, activity class) are computed from the
raw series at enrichment time and keyed by their VitalSign paths, so access
control treats them exactly like measured fields.
"""
from __future__ import annotations

import bisect
import hashlib
import json
import math
import re
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ._time import DAY, MINUTE
from .caregraph import AccessLevel, PermissionSet, filter_fields
from .connectors.base import ProfileEvent
from .ontology import OntologySchema, Quantity, record_to_raw, validate_event
from .render import empty_line, feature_line
from .vault.audit import canonical_json, sha256_hex

FLAGS = ("ok", "attention", "urgent")

# (urgent_below, attention_below, attention_above, urgent_above) on the window mean
FLAG_BANDS: dict[str, tuple[float, float, float, float]] = {
    "VitalSign.heart_rate": (40, 50, 100, 120),
    "VitalSign.resting_heart_rate": (35, 45, 90, 110),
    "VitalSign.hrv_rmssd": (5, 15, math.inf, math.inf),
    "VitalSign.spo2": (90, 95, math.inf, math.inf),
    "VitalSign.systolic_bp": (80, 90, 140, 160),
    "VitalSign.diastolic_bp": (50, 60, 90, 100),
    "VitalSign.steps": (-math.inf, 100, math.inf, math.inf),
    "VitalSign.sleep_duration": (240, 360, 600, math.inf),
    "VitalSign.sleep_efficiency": (65, 80, math.inf, math.inf),
    "VitalSign.sleep_score": (40, 60, math.inf, math.inf),
    "VitalSign.respiratory_rate": (8, 12, 20, 25),
    "VitalSign.skin_temperature": (34, 35, 37.5, 38.5),
    "Medication.adherence": (70, 90, math.inf, math.inf),
}
SEVERITY_FLAGS = {"mild": "ok", "moderate": "attention", "severe": "urgent"}
URGENT_EVENTS = frozenset({"fall", "hospital_admission", "emergency_call"})

ACTIVITY_THRESHOLDS = ((250.0, "sedentary"), (1000.0, "light"), (3000.0, "moderate"))
SLEEP_TARGET_MIN = 480.0


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class TimeWindow:
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ProfileError(f"window start {self.start} is not before end {self.end}")

    def contains(self, t: float) -> bool:
        return self.start <= t < self.end

    @property
    def duration(self) -> float:
        return self.end - self.start

    def to_json(self) -> dict:
        return {"start": self.start, "end": self.end}


# ---------------------------------------------------------------------------
# Cadences (what "complete" data would look like)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PeriodicCadence:
    period_s: float
    phase_s: float = 0.0

    def expected(self, window: TimeWindow) -> int:
        first = math.ceil((window.start - self.phase_s) / self.period_s)
        last = math.ceil((window.end - self.phase_s) / self.period_s)
        return max(0, last - first)

    def to_json(self) -> dict:
        return {"type": "periodic", "period_s": self.period_s, "phase_s": self.phase_s}


@dataclass(frozen=True)
class ScheduleCadence:
    """Explicit slot times, for bursty schedules such as daily HR bouts."""

    bouts: tuple[tuple[float, int, float], ...]  # (start, n_slots, step)

    def expected(self, window: TimeWindow) -> int:
        n = 0
        for start, count, step in self.bouts:
            lo = max(0, math.ceil((window.start - start) / step))
            hi = min(count, math.ceil((window.end - start) / step))
            n += max(0, hi - lo)
        return n

    def to_json(self) -> dict:
        return {"type": "schedule", "bouts": [list(b) for b in self.bouts]}


def cadence_from_json(d: Mapping) -> PeriodicCadence | ScheduleCadence:
    if d["type"] == "periodic":
        return PeriodicCadence(float(d["period_s"]), float(d.get("phase_s", 0.0)))
    return ScheduleCadence(tuple((float(a), int(b), float(c)) for a, b, c in d["bouts"]))


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Baseline:
    value: float | None
    mad: float | None
    n_days: int
    sufficient: bool

    @property
    def flag(self) -> str:
        return "" if self.sufficient else "insufficient_history"


@dataclass(frozen=True)
class Feature:
    path: str
    kind: str  # quantity | code
    unit: str | None = None
    level: AccessLevel = AccessLevel.FULL
    count: int | None = 0
    missing_fraction: float | None = None
    mean: float | None = None
    min: float | None = None
    max: float | None = None
    latest: float | None = None
    latest_ts: float | None = None
    values: tuple[tuple[float, str], ...] = ()
    baseline: float | None = None
    baseline_mad: float | None = None
    delta: float | None = None
    flag: str = "ok"
    source_ids: tuple[str, ...] = ()
    note: str = ""

    def __post_init__(self):
        if self.missing_fraction is not None and not 0.0 <= self.missing_fraction <= 1.0:
            raise ProfileError(f"{self.path}: missing fraction {self.missing_fraction} out of [0,1]")
        if self.flag not in FLAGS:
            raise ProfileError(f"{self.path}: unknown flag {self.flag}")

    def at_level(self, level: AccessLevel) -> "Feature":
        level = AccessLevel(min(level, self.level))
        if level >= AccessLevel.FULL:
            return self
        if level == AccessLevel.AGGREGATE:
            return replace(self, level=level, latest=None, latest_ts=None, values=(),
                           baseline=None, baseline_mad=None, delta=None, note="")
        return Feature(self.path, self.kind, None, level, None, None, flag=self.flag,
                       source_ids=self.source_ids)

    @property
    def relative_salience(self) -> float:
        if self.delta is None or not self.baseline:
            return 0.0
        return abs(self.delta) / abs(self.baseline)

    def to_json(self) -> dict:
        out: dict[str, Any] = {"path": self.path, "kind": self.kind, "level": self.level.label,
                               "flag": self.flag, "source_ids": list(self.source_ids)}
        for name in ("unit", "count", "missing_fraction", "mean", "min", "max", "latest", "latest_ts",
                     "baseline", "baseline_mad", "delta"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        if self.values:
            out["values"] = [list(v) for v in self.values]
        if self.note:
            out["note"] = self.note
        return out


@dataclass(frozen=True)
class FeatureSet:
    subject: str
    window: TimeWindow
    features: Mapping[str, Feature]
    missing_fraction: float = 0.0
    filtered_for: str | None = None

    def __getitem__(self, path: str) -> Feature:
        return self.features[path]

    def get(self, path: str) -> Feature | None:
        return self.features.get(path)

    @property
    def hrv_rmssd(self) -> float | None:
        f = self.features.get("VitalSign.hrv_rmssd")
        return None if f is None else f.mean

    @property
    def sleep_score(self) -> float | None:
        f = self.features.get("VitalSign.sleep_score")
        return None if f is None else f.mean

    @property
    def activity_class(self) -> str | None:
        f = self.features.get("VitalSign.activity_class")
        return f.values[-1][1] if f is not None and f.values else None

    @property
    def baselines(self) -> dict[str, float]:
        return {p: f.baseline for p, f in self.features.items() if f.baseline is not None}

    @property
    def deltas(self) -> dict[str, float]:
        return {p: f.delta for p, f in self.features.items() if f.delta is not None}

    def source_ids(self) -> set[str]:
        return {i for f in self.features.values() for i in f.source_ids}

    def to_json(self) -> dict:
        return {
            "subject": self.subject,
            "window": self.window.to_json(),
            "missing_fraction": self.missing_fraction,
            "filtered_for": self.filtered_for,
            "features": {p: f.to_json() for p, f in sorted(self.features.items())},
        }

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_json())


def flag_for(path: str, feat_mean: float | None, codes: Sequence[str] = ()) -> str:
    if path == "Symptom.severity":
        worst = "ok"
        for c in codes:
            f = SEVERITY_FLAGS.get(c, "attention")
            if FLAGS.index(f) > FLAGS.index(worst):
                worst = f
        return worst
    if path == "Event.kind":
        if any(c in URGENT_EVENTS for c in codes):
            return "urgent"
        return "attention" if codes else "ok"
    if path == "Symptom.name":
        return "attention" if codes else "ok"
    bands = FLAG_BANDS.get(path)
    if bands is None or feat_mean is None:
        return "ok"
    ub, ab, aa, ua = bands
    if feat_mean < ub or feat_mean > ua:
        return "urgent"
    if feat_mean < ab or feat_mean > aa:
        return "attention"
    return "ok"


def rmssd_from_hr(ts: np.ndarray, hr: np.ndarray, step_s: float = MINUTE) -> float | None:
    """RMSSD of 60000/HR inter-beat intervals over consecutive-minute pairs."""
    if len(hr) < 2:
        return None
    ibi = 60000.0 / hr
    consecutive = np.isclose(np.diff(ts), step_s)
    if not consecutive.any():
        return None
    d = np.diff(ibi)[consecutive]
    return float(np.sqrt(np.mean(d * d)))


def sleep_score(duration_min: float, efficiency_pct: float) -> float:
    score = 0.6 * min(duration_min / SLEEP_TARGET_MIN, 1.0) * 100.0 + 0.4 * efficiency_pct
    return float(min(100.0, max(0.0, score)))


def activity_class(steps_per_hour: float) -> str:
    for bound, name in ACTIVITY_THRESHOLDS:
        if steps_per_hour < bound:
            return name
    return "vigorous"


def daily_means(ts: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(ts) == 0:
        return np.array([], dtype=np.int64), np.array([])
    days = np.floor(ts / DAY).astype(np.int64)
    uniq, inv = np.unique(days, return_inverse=True)
    sums = np.bincount(inv, weights=values)
    counts = np.bincount(inv)
    return uniq, sums / counts


def compute_delta(current: float | None, baseline: Baseline | float | None) -> float | None:
    if isinstance(baseline, Baseline):
        if not baseline.sufficient:
            return None
        baseline = baseline.value
    if current is None or baseline is None:
        return None
    return float(current - baseline)


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------


@dataclass
class _Series:
    ts: list[float] = field(default_factory=list)
    values: list[Any] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)
    _arrays: tuple | None = None

    def add(self, t: float, v: Any, event_id: str) -> None:
        i = bisect.bisect_right(self.ts, t)
        self.ts.insert(i, t)
        self.values.insert(i, v)
        self.ids.insert(i, event_id)
        self._arrays = None

    def arrays(self) -> tuple[np.ndarray, np.ndarray | None]:
        if self._arrays is None:
            ts = np.asarray(self.ts, dtype=float)
            numeric = all(isinstance(v, (int, float)) for v in self.values)
            vals = np.asarray(self.values, dtype=float) if numeric else None
            self._arrays = (ts, vals)
        return self._arrays

    def span(self, start: float, end: float) -> tuple[int, int]:
        return bisect.bisect_left(self.ts, start), bisect.bisect_left(self.ts, end)


@dataclass
class EnrichConfig:
    baseline_horizon_days: int = 14
    baseline_min_days: int = 7
    hr_step_s: float = MINUTE
    tracked_missingness: tuple[str, ...] = (
        "VitalSign.heart_rate", "VitalSign.steps", "VitalSign.sleep_duration", "VitalSign.systolic_bp",
    )


@dataclass
class SnapshotRecord:
    id: str
    audience: str
    window: TimeWindow
    body: bytes


class ProfileStore:
    """Sealed event log plus an (entity, field, time) index for one subject."""

    def __init__(self, subject: str, schema: OntologySchema, vault=None, ledger=None,
                 partition: str = "system", config: EnrichConfig | None = None):
        self.subject = subject
        self.schema = schema
        self.vault = vault
        self.ledger = ledger
        self.partition = partition
        self.config = config or EnrichConfig()
        self.events: dict[str, ProfileEvent] = {}
        self.index: dict[str, _Series] = {}
        self.cadences: dict[str, PeriodicCadence | ScheduleCadence] = {}
        self.snapshots: dict[str, SnapshotRecord] = {}
        self._lock = threading.Lock()
        self._cache: dict[tuple, FeatureSet] = {}

    def __len__(self) -> int:
        return len(self.events)

    def set_cadence(self, path: str, cadence) -> None:
        self.cadences[path] = cadence
        self._cache.clear()

    # -- ingest ----------------------------------------------------------------

    def _check(self, event: ProfileEvent) -> None:
        validate_event(self.schema, record_to_raw(event.event), event.entity)
        prov = event.provenance
        if not prov.source_device_id or prov.server_ts is None or prov.device_ts is None:
            raise ProfileError(f"event {event.id} lacks complete provenance")

    def ingest_event(self, event: ProfileEvent, ts: float | None = None, _audit: bool = True) -> str:
        if event.id in self.events:
            return event.id
        self._check(event)
        with self._lock:
            if event.id in self.events:
                return event.id
            if self.vault is not None:
                body = json.dumps(event.to_json(), sort_keys=True).encode()
                self.vault.put("local", event.id, body, partition=self.subject,
                               schema_version=event.event.version, flush=False)
            self.events[event.id] = event
            t = event.ts
            for name, value in event.event.fields.items():
                if name in ("ts", "start"):
                    continue
                v = value.value if isinstance(value, Quantity) else value
                self.index.setdefault(f"{event.entity}.{name}", _Series()).add(t, v, event.id)
            self._cache.clear()
        if _audit:
            self._audit_ingest([event.id], ts if ts is not None else event.provenance.server_ts)
        return event.id

    def ingest_many(self, events: Iterable[ProfileEvent], ts: float | None = None) -> list[str]:
        new = []
        last = None
        for ev in events:
            if ev.id in self.events:
                continue
            self.ingest_event(ev, _audit=False)
            new.append(ev.id)
            last = ev.provenance.server_ts
        if self.vault is not None:
            self.vault.stores["local"].flush()
        if new:
            self._audit_ingest(new, ts if ts is not None else last)
        return new

    def _audit_ingest(self, ids: list[str], ts: float) -> None:
        if self.ledger is None:
            return
        self.ledger.append(self.partition, "ingest", {
            "subject_id": self.subject,
            "count": len(ids),
            "ids_hash": sha256_hex("|".join(sorted(ids)).encode()),
        }, float(ts))

    def load_sealed(self, event_id: str) -> ProfileEvent:
        if self.vault is None:
            return self.events[event_id]
        return ProfileEvent.from_json(json.loads(self.vault.get("local", event_id)))

    # -- queries -----------------------------------------------------------------

    def series(self, path: str, window: TimeWindow | None = None) -> tuple[np.ndarray, list, list[str]]:
        s = self.index.get(path)
        if s is None:
            return np.array([]), [], []
        lo, hi = (0, len(s.ts)) if window is None else s.span(window.start, window.end)
        ts, vals = s.arrays()
        return ts[lo:hi], (s.values[lo:hi] if vals is None else vals[lo:hi]), s.ids[lo:hi]

    def paths(self) -> list[str]:
        return sorted(self.index)

    def store_snapshot(self, audience: str, window: TimeWindow, body: Mapping) -> str:
        data = canonical_json(body)
        sid = "sn-" + hashlib.sha256(data).hexdigest()[:24]
        if self.vault is not None:
            self.vault.put("actor_cache", sid, data, partition=self.subject, flush=False)
            data = b""
        self.snapshots[sid] = SnapshotRecord(sid, audience, window, data)
        return sid

    def load_snapshot(self, sid: str) -> dict:
        rec = self.snapshots[sid]
        data = self.vault.get("actor_cache", sid) if self.vault is not None else rec.body
        return json.loads(data)


def compute_baseline(store: ProfileStore, metric: str, horizon: TimeWindow | float,
                     min_days: int | None = None) -> Baseline:
    """Rolling median of daily means. ``horizon`` is either the window whose
    history is wanted (the preceding ``baseline_horizon_days`` are used) or an
    explicit history window."""
    cfg = store.config
    min_days = cfg.baseline_min_days if min_days is None else min_days
    if isinstance(horizon, TimeWindow):
        hist = horizon
    else:
        hist = TimeWindow(float(horizon) - cfg.baseline_horizon_days * DAY, float(horizon))
    ts, vals, _ = store.series(metric, hist)
    if not isinstance(vals, np.ndarray) or len(ts) == 0:
        return Baseline(None, None, 0, False)
    _, means = daily_means(ts, vals)
    if len(means) < min_days:
        return Baseline(None, None, len(means), False)
    med = float(np.median(means))
    mad = float(np.median(np.abs(means - med)))
    return Baseline(med, mad, len(means), True)


def _history(store: ProfileStore, window: TimeWindow) -> TimeWindow:
    return TimeWindow(window.start - store.config.baseline_horizon_days * DAY, window.start)


def _quantity_feature(store: ProfileStore, path: str, window: TimeWindow, unit: str | None) -> Feature | None:
    ts, vals, ids = store.series(path, window)
    if len(ids) == 0:
        return None
    vals = np.asarray(vals, dtype=float)
    mean = float(vals.mean())
    base = compute_baseline(store, path, _history(store, window))
    mf = None
    cad = store.cadences.get(path)
    if cad is not None and path in store.config.tracked_missingness:
        expected = cad.expected(window)
        if expected > 0:
            mf = min(1.0, max(0.0, 1.0 - len(np.unique(ts)) / expected))
    return Feature(
        path=path, kind="quantity", unit=unit, count=len(ids), missing_fraction=mf,
        mean=mean, min=float(vals.min()), max=float(vals.max()),
        latest=float(vals[-1]), latest_ts=float(ts[-1]),
        baseline=base.value, baseline_mad=base.mad, delta=compute_delta(mean, base),
        flag=flag_for(path, mean), source_ids=tuple(ids), note=base.flag,
    )


def _code_feature(store: ProfileStore, path: str, window: TimeWindow) -> Feature | None:
    ts, vals, ids = store.series(path, window)
    if len(ids) == 0:
        return None
    values = tuple((float(t), str(v)) for t, v in zip(ts, vals))
    return Feature(path=path, kind="code", count=len(ids), values=values,
                   flag=flag_for(path, None, [v for _, v in values]), source_ids=tuple(ids))


def enrich_features(store: ProfileStore, window: TimeWindow) -> FeatureSet:
    key = (window.start, window.end)
    cached = store._cache.get(key)
    if cached is not None:
        return cached
    feats: dict[str, Feature] = {}
    for path in store.paths():
        fdef = store.schema.field(path)
        if fdef.kind == "quantity":
            f = _quantity_feature(store, path, window, fdef.unit)
        elif fdef.kind == "code":
            f = _code_feature(store, path, window)
        else:
            f = None
        if f is not None:
            feats[path] = f

    # HRV from minute HR, unless the device reported it directly
    hr = "VitalSign.heart_rate"
    if "VitalSign.hrv_rmssd" not in feats and hr in feats:
        ts, vals, ids = store.series(hr, window)
        r = rmssd_from_hr(ts, np.asarray(vals, dtype=float), store.config.hr_step_s)
        if r is not None:
            feats["VitalSign.hrv_rmssd"] = Feature(
                path="VitalSign.hrv_rmssd", kind="quantity", unit="ms", count=1, mean=r, min=r, max=r,
                latest=r, latest_ts=float(ts[-1]), flag=flag_for("VitalSign.hrv_rmssd", r),
                source_ids=tuple(ids), note="derived_from_minute_hr",
            )

    # nightly sleep score from duration/efficiency pairs at the same timestamp
    if "VitalSign.sleep_score" not in feats:
        dts, dvals, dids = store.series("VitalSign.sleep_duration", window)
        ets, evals, eids = store.series("VitalSign.sleep_efficiency", window)
        eff = {float(t): (float(v), i) for t, v, i in zip(ets, evals, eids)}
        scores, sts, sids = [], [], []
        for t, v, i in zip(dts, dvals, dids):
            match = eff.get(float(t))
            if match is not None:
                scores.append(sleep_score(float(v), match[0]))
                sts.append(float(t))
                sids.extend((i, match[1]))
        if scores:
            arr = np.asarray(scores)
            m = float(arr.mean())
            feats["VitalSign.sleep_score"] = Feature(
                path="VitalSign.sleep_score", kind="quantity", unit="score", count=len(scores),
                mean=m, min=float(arr.min()), max=float(arr.max()), latest=float(arr[-1]),
                latest_ts=sts[-1], flag=flag_for("VitalSign.sleep_score", m), source_ids=tuple(sids),
                note="derived_from_sleep",
            )

    if "VitalSign.activity_class" not in feats and "VitalSign.steps" in feats:
        steps = feats["VitalSign.steps"]
        cls = activity_class(steps.mean)
        feats["VitalSign.activity_class"] = Feature(
            path="VitalSign.activity_class", kind="code", count=1, values=((steps.latest_ts, cls),),
            flag="attention" if cls == "sedentary" else "ok", source_ids=steps.source_ids,
            note="derived_from_steps",
        )

    total_expected = 0
    total_missing = 0.0
    for path in store.config.tracked_missingness:
        cad = store.cadences.get(path)
        if cad is None:
            continue
        expected = cad.expected(window)
        if expected == 0:
            continue
        ts, _, _ = store.series(path, window)
        total_expected += expected
        total_missing += max(0, expected - len(np.unique(ts)))
    mf = total_missing / total_expected if total_expected else (0.0 if feats else 1.0)
    fs = FeatureSet(store.subject, window, dict(sorted(feats.items())), float(mf))
    store._cache[key] = fs
    return fs


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

DEFAULT_TOKEN_BUDGET = 1200
NO_SHARED_DATA = "No shared data for this audience in the window."
_WORD_RE = re.compile(r"[a-z]+")


@dataclass(frozen=True)
class ProfileSnapshot:
    subject: str
    window: TimeWindow
    allowed: Mapping[str, AccessLevel]
    features: Mapping[str, Feature]
    text: str
    topic_hints: tuple[str, ...] = ()
    dropped: tuple[str, ...] = ()

    @property
    def fields(self) -> frozenset[str]:
        return frozenset(self.features)

    @property
    def id(self) -> str:
        return "sn-" + hashlib.sha256(canonical_json(self.to_json())).hexdigest()[:24]

    def source_ids(self) -> set[str]:
        return {i for f in self.features.values() for i in f.source_ids}

    def to_json(self) -> dict:
        return {
            "subject": self.subject,
            "window": self.window.to_json(),
            "fields": sorted(self.features),
            "features": {p: f.to_json() for p, f in sorted(self.features.items())},
            "text": self.text,
            "topic_hints": list(self.topic_hints),
            "dropped": list(self.dropped),
        }


def token_count(text: str) -> int:
    return len(text.split())


def _as_levels(allowed) -> dict[str, AccessLevel]:
    if isinstance(allowed, PermissionSet):
        return {p: allowed.level(p) for p in allowed.fields}
    if isinstance(allowed, Mapping):
        return {p: AccessLevel.parse(l) for p, l in allowed.items() if AccessLevel.parse(l) > 0}
    return {p: AccessLevel.FULL for p in allowed}


def topic_hints(chat_context: Sequence[tuple[str, str]] | None, allowed: Iterable[str]) -> tuple[str, ...]:
    """Allowed field paths whose name words appear in recent chat turns."""
    if not chat_context:
        return ()
    words = set()
    for _, text in chat_context:
        words.update(_WORD_RE.findall(text.lower()))
    hits = []
    for path in sorted(allowed):
        parts = path.split(".", 1)[1].split("_")
        if any(p in words for p in parts if len(p) > 2):
            hits.append(path)
    return tuple(hits)


def build_snapshot(store: ProfileStore, allowed, chat_context=None, window: TimeWindow | None = None,
                   token_budget: int = DEFAULT_TOKEN_BUDGET,
                   features: FeatureSet | None = None) -> ProfileSnapshot:
    """Permission-limited, budgeted view of the subject. Chat context only
    yields topic hints among allowed fields."""
    levels = _as_levels(allowed)
    if window is None:
        end = max((e.ts for e in store.events.values()), default=0.0) + 1.0
        window = TimeWindow(end - DAY, end)
    hints = topic_hints(chat_context, levels)
    if not levels:
        return ProfileSnapshot(store.subject, window, {}, {}, NO_SHARED_DATA, hints)
    fs = features if features is not None else enrich_features(store, window)
    perm = PermissionSet("snapshot", store.subject, levels, window.end)
    filtered = filter_fields(fs, perm).features
    if not filtered:
        return ProfileSnapshot(store.subject, window, levels, {}, NO_SHARED_DATA, hints)
    ranked = sorted(filtered.values(),
                    key=lambda f: (f.relative_salience, f.latest_ts or 0.0, f.path), reverse=True)
    header = f"Profile snapshot for {store.subject}:"
    lines = [feature_line(f) for f in ranked]
    kept = list(range(len(ranked)))
    while kept and token_count(header) + sum(token_count(lines[i]) for i in kept) > token_budget:
        kept.pop()  # lowest salience sits last
    chosen = [ranked[i] for i in kept]
    dropped = tuple(sorted(f.path for f in ranked[len(kept):]))
    text = "\n".join([header] + [lines[i] for i in kept]) if chosen else NO_SHARED_DATA
    return ProfileSnapshot(store.subject, window, levels, {f.path: f for f in chosen}, text, hints, dropped)


def render_fields(features: Mapping[str, Feature], paths: Sequence[str],
                  labels: Mapping[str, str] | None = None) -> list[str]:
    labels = labels or {}
    out = []
    for p in paths:
        f = features.get(p)
        out.append(feature_line(f, labels.get(p)) if f is not None else empty_line(p, labels.get(p)))
    return out
