"""Synthetic care-circle corpus: generation, persistence, and loading into profile stores."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .._time import DAY, HOUR, MINUTE, to_utc
from ..caregraph import Role
from ..connectors.base import ProfileEvent, Provenance, RawSample
from ..connectors.capture import PipelineReport, run_capture_pipeline
from ..ontology import OntologySchema, validate_event
from ..profile import PeriodicCadence, ProfileStore, ScheduleCadence, TimeWindow
from .config import ConfigError, SimConfig

SIGNALS = ("heart_rate", "steps", "sleep", "bp")
SIGNAL_METRICS = {
    "heart_rate": (("heart_rate", "bpm"),),
    "steps": (("steps", "steps/hour"),),
    "sleep": (("sleep_duration", "minutes"), ("sleep_efficiency", "%")),
    "bp": (("systolic_bp", "mmHg"), ("diastolic_bp", "mmHg")),
}
FIRMWARE = "3.1.0"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CircleSpec:
    id: str
    index: int
    subject: str
    members: tuple[tuple[str, str], ...]  # (actor, role value)
    covariates: Mapping[str, Any]

    @property
    def size(self) -> int:
        return len(self.members)

    def to_json(self) -> dict:
        return {"id": self.id, "index": self.index, "subject": self.subject,
                "members": [list(m) for m in self.members], "covariates": dict(self.covariates)}

    @classmethod
    def from_json(cls, d: Mapping) -> "CircleSpec":
        return cls(d["id"], int(d["index"]), d["subject"], tuple(tuple(m) for m in d["members"]),
                   dict(d["covariates"]))


@dataclass
class SubjectStream:
    """One subject's sensor slots and typed events, with ground-truth labels."""

    circle_id: str
    subject: str
    # signal -> (ts, values[n, k]); ts is UTC, values one column per metric of the signal
    sensors: dict[str, tuple[np.ndarray, np.ndarray]]
    scheduled: dict[str, int]
    hr_bouts: tuple[tuple[float, int, float], ...]
    typed: list[dict]
    labels: dict[str, Any] = field(default_factory=dict)

    @property
    def missing_fraction(self) -> float:
        total = sum(self.scheduled.values())
        return self.labels["missing_slots"] / total if total else 0.0

    def sample_count(self) -> int:
        return sum(len(ts) for ts, _ in self.sensors.values())


@dataclass
class SyntheticCorpus:
    config: SimConfig
    circles: list[CircleSpec]
    streams: dict[str, SubjectStream]

    @property
    def window(self) -> TimeWindow:
        t0 = to_utc(self.config.start)
        return TimeWindow(t0, t0 + self.config.days * DAY)

    def circle(self, circle_id: str) -> CircleSpec:
        for c in self.circles:
            if c.id == circle_id:
                return c
        raise CorpusError(f"no circle {circle_id}")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _choice(rng: np.random.Generator, pmf: Mapping[str, float]) -> str:
    keys = list(pmf)
    return keys[int(rng.choice(len(keys), p=np.array([pmf[k] for k in keys])))]


def _gap_mask(rng: np.random.Generator, n: int, k: int, mean_len: float) -> np.ndarray:
    """Exactly ``k`` of ``n`` slots missing, placed as random bursts."""
    mask = np.zeros(n, dtype=bool)
    if k <= 0:
        return mask
    if k >= n:
        mask[:] = True
        return mask
    p = 1.0 / max(mean_len, 1.0)
    while mask.sum() < k:
        length = int(min(k - mask.sum(), rng.geometric(p)))
        start = int(rng.integers(0, n - length + 1))
        mask[start:start + length] = True
    return mask  # each burst is capped at the shortfall, so overlap never overshoots


def _runs(ts: np.ndarray, mask: np.ndarray) -> list[dict]:
    out = []
    i = 0
    while i < len(mask):
        if mask[i]:
            j = i
            while j + 1 < len(mask) and mask[j + 1]:
                j += 1
            out.append({"start": float(ts[i]), "end": float(ts[j]), "slots": j - i + 1})
            i = j + 1
        else:
            i += 1
    return out


def _hr_schedule(cfg: SimConfig, t0: float) -> tuple[tuple[float, int, float], ...]:
    s = cfg.signals
    base, extra = divmod(s.hr_minutes_total, cfg.days)
    bouts = []
    nb = len(s.hr_bout_hours)
    for d in range(cfg.days):
        minutes = base + (1 if d < extra else 0)
        per, rem = divmod(minutes, nb)
        for b, hour in enumerate(s.hr_bout_hours):
            n = per + (1 if b < rem else 0)
            if n:
                bouts.append((t0 + d * DAY + hour * HOUR, n, MINUTE))
    return tuple(bouts)


def _covariates(cfg: SimConfig, rng: np.random.Generator) -> dict:
    age = int(rng.integers(cfg.age_range[0], cfg.age_range[1] + 1))
    sex = "F" if rng.random() < 0.5 else "M"
    comorb = sorted(c for c, p in cfg.comorbidity_rates.items() if rng.random() < p)
    return {"age": age, "sex": sex, "comorbidities": comorb}


def _circle_members(cfg: SimConfig, rng: np.random.Generator, index: int) -> tuple[str, tuple]:
    size = int(_choice(rng, cfg.circle_size_pmf))
    prefix = f"c{index:04d}"
    subject = f"{prefix}-subject"
    members = [(subject, Role.SUBJECT.value), (f"{prefix}-m1", Role.CARE_PRIMARY.value)]
    for j in range(2, size):
        members.append((f"{prefix}-m{j}", _choice(rng, cfg.extra_role_weights)))
    return subject, tuple(members)


def generate_circle(cfg: SimConfig, index: int) -> tuple[CircleSpec, SubjectStream]:
    """Everything about circle ``index`` comes from the sub-seed (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    s = cfg.signals
    subject, members = _circle_members(cfg, rng, index)
    cov = _covariates(cfg, rng)
    cid = f"circle-{index:04d}"
    spec = CircleSpec(cid, index, subject, members, cov)
    t0 = to_utc(cfg.start)

    if cfg.missingness_mean <= 0:
        miss = 0.0
    elif cfg.missingness_mean >= 1:
        miss = 1.0
    else:
        a = cfg.missingness_mean * cfg.missingness_concentration
        miss = float(rng.beta(a, cfg.missingness_concentration - a))

    hr_shift = (s.age_hr_per_decade * (cov["age"] - 70) / 10.0
                + (s.female_hr if cov["sex"] == "F" else 0.0)
                + (s.diabetes_hr if "diabetes" in cov["comorbidities"] else 0.0)
                + (s.copd_hr if "copd" in cov["comorbidities"] else 0.0))
    htn = "hypertension" in cov["comorbidities"]

    # heart rate
    bouts = _hr_schedule(cfg, t0)
    hr_ts = np.concatenate([start + np.arange(n) * step for start, n, step in bouts]) if bouts else np.array([])
    local_h = ((hr_ts - t0) / HOUR) % 24
    hr = s.hr_base + hr_shift + s.hr_amplitude * np.sin(2 * np.pi * (local_h - 10) / 24)
    hr = np.round(hr + rng.normal(0, s.hr_noise, len(hr_ts)))

    # steps
    st_ts = t0 + np.arange(cfg.days * 24) * HOUR
    hours = np.arange(cfg.days * 24) % 24
    day = (hours >= s.day_hours[0]) & (hours < s.day_hours[1])
    lam = np.where(day, s.steps_day_mean, s.steps_night_mean)
    zero = rng.random(len(st_ts)) < np.where(day, s.steps_day_zero, s.steps_night_zero)
    steps = np.where(zero, 0, rng.poisson(lam)).astype(float)

    # sleep
    sl_ts = t0 + np.arange(cfg.days) * DAY + s.sleep_hour * HOUR
    dur = np.round(np.clip(rng.normal(s.sleep_duration_mean, s.sleep_duration_sd, cfg.days), 120, 720))
    eff = np.round(np.clip(rng.normal(s.sleep_efficiency_mean, s.sleep_efficiency_sd, cfg.days), 50, 99))

    # blood pressure: slow drift plus reading noise
    bp_ts = t0 + np.arange(cfg.days) * DAY + s.bp_hour * HOUR
    drift = np.cumsum(rng.normal(0, s.bp_drift_sd, cfg.days))
    sys_ = np.round(s.systolic_base + (s.hypertension_systolic if htn else 0) + drift
                    + rng.normal(0, s.bp_noise, cfg.days))
    dia = np.round(s.diastolic_base + (s.hypertension_diastolic if htn else 0) + 0.5 * drift
                   + rng.normal(0, s.bp_noise * 0.7, cfg.days))

    raw = {
        "heart_rate": (hr_ts, hr[:, None]),
        "steps": (st_ts, steps[:, None]),
        "sleep": (sl_ts, np.stack([dur, eff], axis=1)),
        "bp": (bp_ts, np.stack([sys_, dia], axis=1)),
    }
    sensors = {}
    scheduled = {}
    gaps = []
    missing = 0
    for sig in SIGNALS:
        ts, vals = raw[sig]
        n = len(ts)
        k = int(round(miss * n))
        mask = _gap_mask(rng, n, k, cfg.gap_mean_length.get(sig, 1.0))
        for g in _runs(ts, mask):
            gaps.append({"signal": sig, **g})
        scheduled[sig] = n
        missing += int(mask.sum())
        sensors[sig] = (ts[~mask], vals[~mask].copy())

    # heart-rate outliers, kept apart from each other and from bout edges
    outliers = []
    n_out = int(rng.poisson(cfg.outliers_mean))
    ts, vals = sensors["heart_rate"]
    if n_out and len(ts) >= 5:
        gap_s = np.diff(ts)
        interior = [i for i in range(2, len(ts) - 2)
                    if gap_s[i - 2] == MINUTE and gap_s[i - 1] == MINUTE and gap_s[i] == MINUTE and gap_s[i + 1] == MINUTE]
        chosen = []
        for i in rng.permutation(interior):
            if all(abs(int(i) - c) > 5 for c in chosen):
                chosen.append(int(i))
            if len(chosen) == n_out:
                break
        for i in sorted(chosen):
            clean = float(vals[i, 0])
            vals[i, 0] = clean + round(float(rng.uniform(s.outlier_min, s.outlier_max)))
            outliers.append({"signal": "heart_rate", "ts": float(ts[i]), "value": float(vals[i, 0]),
                             "clean": clean})

    typed = _typed_events(cfg, rng, t0, cov)
    labels = {
        "missingness_rate": miss,
        "missing_slots": missing,
        "scheduled_slots": sum(scheduled.values()),
        "gaps": gaps,
        "outliers": outliers,
        "events": [{"entity": e["entity"], "ts": e["fields"]["ts"], "kind": e["fields"].get("kind") or
                    e["fields"].get("name")} for e in typed if e["entity"] in ("Symptom", "Event")],
    }
    stream = SubjectStream(cid, subject, sensors, scheduled, bouts, typed, labels)
    return spec, stream


def _typed_events(cfg: SimConfig, rng: np.random.Generator, t0: float, cov: Mapping) -> list[dict]:
    out = []
    med_key = cov["comorbidities"][0] if cov["comorbidities"] else "none"
    name, dose = cfg.medications[med_key]
    for d in range(cfg.days):
        adh = float(np.round(np.clip(rng.normal(cfg.adherence_mean, cfg.adherence_sd), 0, 100)))
        out.append({"entity": "Medication",
                    "fields": {"ts": t0 + d * DAY + 8 * HOUR, "name": name, "dose": dose, "adherence": adh}})
    span_min = cfg.days * 24 * 60
    for _ in range(int(rng.poisson(cfg.symptoms_mean))):
        t = t0 + float(rng.integers(0, span_min)) * MINUTE
        out.append({"entity": "Symptom", "fields": {
            "ts": t, "name": cfg.symptom_names[int(rng.integers(len(cfg.symptom_names)))],
            "severity": _choice(rng, cfg.severity_weights)}})
    if rng.random() < cfg.fall_rate:
        t = t0 + float(rng.integers(0, span_min)) * MINUTE
        out.append({"entity": "Event", "fields": {"ts": t, "kind": "fall", "description": "fall reported by app"}})
    out.sort(key=lambda e: (e["fields"]["ts"], e["entity"]))
    return out


def generate_corpus(config: SimConfig) -> SyntheticCorpus:
    circles, streams = [], {}
    for i in range(config.n_circles):
        spec, stream = generate_circle(config, i)
        circles.append(spec)
        streams[spec.id] = stream
    return SyntheticCorpus(config, circles, streams)


# ---------------------------------------------------------------------------
# Loading into the engine's types
# ---------------------------------------------------------------------------


def raw_samples(stream: SubjectStream, tz_offset_minutes: int) -> list[RawSample]:
    source = f"{stream.subject}:watch"
    meta = {"device_id": f"{stream.subject}-watch", "firmware": FIRMWARE, "sampling": "periodic"}
    out = []
    for sig in SIGNALS:
        ts, vals = stream.sensors[sig]
        for j, (metric, unit) in enumerate(SIGNAL_METRICS[sig]):
            for t, v in zip(ts.tolist(), vals[:, j].tolist()):
                out.append(RawSample(source, metric, v, unit, t + tz_offset_minutes * 60.0,
                                     tz_offset_minutes=tz_offset_minutes, server_ts=t, meta=meta))
    return out


def typed_profile_events(stream: SubjectStream, schema: OntologySchema, tz_offset_minutes: int) -> list[ProfileEvent]:
    out = []
    for e in stream.typed:
        t = float(e["fields"]["ts"])
        te = validate_event(schema, e["fields"], e["entity"])
        prov = Provenance(f"{stream.subject}-app", "app/1", "self_report", t + tz_offset_minutes * 60.0, t,
                          tz_offset_minutes)
        out.append(ProfileEvent(te, prov, (f"{e['entity']}.ts",)))
    return out


def set_cadences(store: ProfileStore, stream: SubjectStream, config: SimConfig) -> None:
    t0 = to_utc(config.start)
    s = config.signals
    store.set_cadence("VitalSign.heart_rate", ScheduleCadence(stream.hr_bouts))
    store.set_cadence("VitalSign.steps", PeriodicCadence(HOUR, t0 % HOUR))
    store.set_cadence("VitalSign.sleep_duration", PeriodicCadence(DAY, (t0 + s.sleep_hour * HOUR) % DAY))
    store.set_cadence("VitalSign.systolic_bp", PeriodicCadence(DAY, (t0 + s.bp_hour * HOUR) % DAY))


def build_store(stream: SubjectStream, config: SimConfig, schema: OntologySchema, ledger=None,
                vault=None) -> tuple[ProfileStore, PipelineReport]:
    """Sensor slots go through the capture pipeline; typed events are validated directly."""
    store = ProfileStore(stream.subject, schema, vault=vault, ledger=ledger, partition=stream.circle_id)
    set_cadences(store, stream, config)
    events, report = run_capture_pipeline(raw_samples(stream, config.tz_offset_minutes), schema)
    events.extend(typed_profile_events(stream, schema, config.tz_offset_minutes))
    store.ingest_many(events, ts=to_utc(config.start) + config.days * DAY)
    return store, report


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_corpus(corpus: SyntheticCorpus, out: str | Path) -> Path:
    out = Path(out)
    for sub in ("sensors", "events", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    files = {}
    for spec in corpus.circles:
        st = corpus.streams[spec.id]
        lines = []
        for sig in SIGNALS:
            ts, vals = st.sensors[sig]
            for t, row in zip(ts.tolist(), vals.tolist()):
                lines.append(_dump_line({"signal": sig, "ts": t, "v": row}))
        p = out / "sensors" / f"{spec.id}.jsonl"
        p.write_text("\n".join(lines) + ("\n" if lines else ""))
        files[str(p.relative_to(out))] = _sha(p)
        p = out / "events" / f"{spec.id}.jsonl"
        p.write_text("".join(_dump_line(e) + "\n" for e in st.typed))
        files[str(p.relative_to(out))] = _sha(p)
        p = out / "labels" / f"{spec.id}.json"
        p.write_text(json.dumps({
            "labels": st.labels, "scheduled": st.scheduled, "hr_bouts": [list(b) for b in st.hr_bouts],
        }, sort_keys=True, indent=1) + "\n")
        files[str(p.relative_to(out))] = _sha(p)
    manifest = {
        "format": 1,
        "config": corpus.config.to_json(),
        "config_hash": corpus.config.hash,
        "circles": [c.to_json() for c in corpus.circles],
        "files": dict(sorted(files.items())),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


def load_corpus(path: str | Path, check_hashes: bool = True) -> SyntheticCorpus:
    path = Path(path)
    mf = path / MANIFEST
    if not mf.exists():
        raise CorpusError(f"{path} has no {MANIFEST}")
    manifest = json.loads(mf.read_text())
    try:
        config = SimConfig.from_json(manifest["config"])
    except (ConfigError, TypeError) as exc:
        raise CorpusError(f"bad corpus config: {exc}") from None
    if check_hashes:
        for rel, digest in manifest["files"].items():
            p = path / rel
            if not p.exists() or _sha(p) != digest:
                raise CorpusError(f"corpus file {rel} is missing or modified")
    circles = [CircleSpec.from_json(c) for c in manifest["circles"]]
    streams = {}
    for spec in circles:
        by_sig: dict[str, tuple[list, list]] = {s: ([], []) for s in SIGNALS}
        text = (path / "sensors" / f"{spec.id}.jsonl").read_text()
        for line in text.splitlines():
            rec = json.loads(line)
            by_sig[rec["signal"]][0].append(rec["ts"])
            by_sig[rec["signal"]][1].append(rec["v"])
        sensors = {}
        for sig in SIGNALS:
            ts, vals = by_sig[sig]
            width = len(SIGNAL_METRICS[sig])
            sensors[sig] = (np.asarray(ts, dtype=float), np.asarray(vals, dtype=float).reshape(len(ts), width))
        typed = [json.loads(line) for line in (path / "events" / f"{spec.id}.jsonl").read_text().splitlines()]
        lab = json.loads((path / "labels" / f"{spec.id}.json").read_text())
        bouts = tuple((float(a), int(b), float(c)) for a, b, c in lab["hr_bouts"])
        streams[spec.id] = SubjectStream(spec.id, spec.subject, sensors, lab["scheduled"], bouts, typed,
                                         lab["labels"])
    return SyntheticCorpus(config, circles, streams)


def corpus_digest(path: str | Path) -> str:
    """Hash over every file in a corpus directory, by relative path."""
    path = Path(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(path)).encode())
        h.update(b"\0")
        h.update(_sha(p).encode())
    return h.hexdigest()


def calibration(corpus: SyntheticCorpus) -> dict:
    sizes = np.array([c.size for c in corpus.circles])
    miss = np.array([corpus.streams[c.id].missing_fraction for c in corpus.circles])
    outl = np.array([len(corpus.streams[c.id].labels["outliers"]) for c in corpus.circles])
    samples = np.array([corpus.streams[c.id].labels["scheduled_slots"] for c in corpus.circles])
    q1, med, q3 = (float(x) for x in np.percentile(sizes, [25, 50, 75]))
    return {
        "n_circles": len(sizes),
        "circle_size_median": med,
        "circle_size_iqr": [q1, q3],
        "samples_per_subject_mean": float(samples.mean()),
        "missingness_mean": float(miss.mean()),
        "outliers_median": float(np.median(outl)),
    }
