"""Turning a profile into retrievable evidence items.

Each entry records which field paths it exposes and at what level, plus the
structured facts behind its text. Retrieval filters on the exposure map, so
an actor only ever sees entries whose every field they may see at that level.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Mapping

from .._time import DAY, format_iso
from ..caregraph import AccessLevel, PermissionSet
from ..profile import Feature, ProfileStore, TimeWindow, enrich_features
from ..render import feature_line, scan_rendering
from ..retrieval import IndexEntry, VectorIndex
from .types import EvidenceItem

OCCURRENCE_ENTITIES = ("Medication", "Symptom", "Event")
SUMMARY_STATS = ("mean", "min", "max", "count")
SALIENCE_MADS = 1.0


def entry_id(*parts: object) -> str:
    return "ix-" + hashlib.sha256("|".join(str(p) for p in parts).encode()).hexdigest()[:16]


def _label(path: str, labels: Mapping[str, str]) -> str:
    return labels.get(path, path.split(".", 1)[1].replace("_", " "))


def _summary_facts(f: Feature, window: TimeWindow) -> list[dict]:
    return [
        {"path": f.path, "stat": s, "relation": "=", "value": getattr(f, s), "unit": f.unit,
         "window": [window.start, window.end], "level": "aggregate"}
        for s in SUMMARY_STATS if getattr(f, s) is not None
    ]


def _is_salient(f: Feature) -> bool:
    if f.delta is None or f.delta == 0:
        return False
    if not f.baseline_mad:
        return True
    return abs(f.delta) / f.baseline_mad > SALIENCE_MADS


def index_profile(
    index: VectorIndex,
    store: ProfileStore,
    window: TimeWindow,
    labels: Mapping[str, str] | None = None,
    guidelines: Iterable[Mapping] = (),
) -> list[str]:
    """Daily summaries, salient changes, discrete occurrences and guidelines
    for ``window``; returns the ids written."""
    labels = labels or {}
    subject = store.subject
    ids: list[str] = []
    day = window.start
    while day < window.end:
        dw = TimeWindow(day, min(day + DAY, window.end))
        fs = enrich_features(store, dw)
        date = format_iso(dw.start)[:10]
        for path, f in fs.features.items():
            if f.kind != "quantity" or not f.count:
                continue
            agg = f.at_level(AccessLevel.AGGREGATE)
            text = f"Daily summary for {date}\n{feature_line(agg, _label(path, labels))}"
            iid = entry_id(subject, "summary", path, dw.start)
            index.upsert(iid, text, "summary", updated_at=dw.end, meta={
                "subject": subject, "exposes": {path: "aggregate"}, "facts": _summary_facts(agg, dw),
            })
            ids.append(iid)
            if _is_salient(f):
                text = f"Notable change on {date}\n{feature_line(f, _label(path, labels))}"
                iid = entry_id(subject, "profile_item", path, dw.start)
                index.upsert(iid, text, "profile_item", updated_at=dw.end, meta={
                    "subject": subject, "exposes": {path: "full"},
                    "facts": [{"path": path, "stat": "delta", "relation": "=", "value": f.delta,
                               "unit": f.unit, "window": [dw.start, dw.end], "level": "full"}],
                })
                ids.append(iid)
        day += DAY
    ids.extend(_index_occurrences(index, store, window, labels))
    for g in guidelines:
        index.upsert(g["id"], g["text"], "guideline", updated_at=0.0,
                     meta={"subject": None, "exposes": {}, "facts": [], "topics": list(g.get("topics", ()))})
        ids.append(g["id"])
    return ids


def _index_occurrences(index: VectorIndex, store: ProfileStore, window: TimeWindow,
                       labels: Mapping[str, str]) -> list[str]:
    ids = []
    for ev in sorted(store.events.values(), key=lambda e: (e.ts, e.id)):
        if ev.entity not in OCCURRENCE_ENTITIES or not window.contains(ev.ts):
            continue
        day0 = window.start + ((ev.ts - window.start) // DAY) * DAY
        dw = [day0, min(day0 + DAY, window.end)]
        for name, value in sorted(ev.event.fields.items()):
            path = f"{ev.entity}.{name}"
            if name == "ts" or not store.schema.has_path(path):
                continue
            fdef = store.schema.field(path)
            if fdef.kind == "code":
                f = Feature(path, "code", count=1, values=((ev.ts, str(value)),), source_ids=(ev.id,))
                fact = {"path": path, "stat": "mean", "relation": "occurred", "value": str(value),
                        "unit": None, "window": dw, "ts": ev.ts, "level": "full"}
            elif fdef.kind == "quantity":
                v = float(getattr(value, "value", value))
                f = Feature(path, "quantity", fdef.unit, count=1, mean=v, min=v, max=v, latest=v,
                            latest_ts=ev.ts, source_ids=(ev.id,))
                fact = {"path": path, "stat": "latest", "relation": "=", "value": v, "unit": fdef.unit,
                        "window": [ev.ts, ev.ts + 1.0], "level": "full"}
            else:
                continue
            text = f"{ev.entity} record\n{feature_line(f, _label(path, labels))}"
            iid = entry_id(store.subject, "occurrence", ev.id, path)
            index.upsert(iid, text, "profile_item", updated_at=ev.ts,
                         meta={"subject": store.subject, "exposes": {path: "full"}, "facts": [fact]})
            ids.append(iid)
    return ids


def index_prior_output(index: VectorIndex, subject: str, owner: str, item_id: str, text: str,
                       ts: float) -> str:
    """A briefing shown to ``owner`` becomes retrievable by ``owner`` only."""
    exposes = {p: lvl.label for p, lvl in scan_rendering(text).items()}
    index.upsert(item_id, text, "prior_output", updated_at=ts,
                 meta={"subject": subject, "owner": owner, "exposes": exposes, "facts": []})
    return item_id


def acl_predicate(perm: PermissionSet) -> Callable[[IndexEntry], bool]:
    """Entry visible iff it belongs to this subject (or nobody), is not owned by
    another actor, and every field it shows is allowed at that level or above."""
    actor, subject = perm.grantee, perm.subject

    def allowed(entry: IndexEntry) -> bool:
        meta = entry.meta
        if meta.get("subject") not in (None, subject):
            return False
        if meta.get("owner") not in (None, actor):
            return False
        return all(perm.level(p) >= AccessLevel.parse(lvl) for p, lvl in meta.get("exposes", {}).items())

    return allowed


def evidence_items(index: VectorIndex, evidence) -> tuple[EvidenceItem, ...]:
    out = []
    for ev in evidence:
        e = index.get(ev.id)
        out.append(EvidenceItem(ev.id, ev.kind, e.text, ev.score, tuple(e.meta.get("facts", ()))))
    return tuple(out)
