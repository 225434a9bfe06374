"""Claim extraction and the exact oracle verifier."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from ..caregraph import AccessLevel
from ..ontology import UnitError, convert_unit
from ..profile import Feature, ProfileSnapshot
from .types import Claim, EvidenceItem, InsightDraft, Verdict

REL_TOL = 0.02
ABS_TOL = 1e-9
ORACLE_SIGNATURE = "oracle-verifier/v1"

NOT_VISIBLE = "field not visible"
INSUFFICIENT = "insufficient access level"

_AGGREGATE_STATS = ("mean", "min", "max", "count")


def required_level(claim: Claim) -> AccessLevel:
    """Lowest access level at which a claim can be checked at all.

    Comparisons on window aggregates need aggregate; anything that needs an
    individual reading (latest value, trend against baseline, a specific
    occurrence) needs full.
    """
    if claim.relation in ("=", "<", ">") and claim.stat in _AGGREGATE_STATS:
        return AccessLevel.AGGREGATE
    return AccessLevel.FULL


def extract_claims(draft: InsightDraft) -> list[Claim]:
    """One claim per observation carrying a relation; stylistic ones yield none."""
    claims = []
    for i, obs in enumerate(draft.observations):
        if not obs.is_claim:
            continue
        stat = obs.stat or ("delta" if obs.relation in ("trend_up", "trend_down") else "mean")
        claims.append(Claim(
            id=f"cl-{i:03d}", field=obs.field, relation=obs.relation, value=obs.value, unit=obs.unit,
            stat=stat, window=obs.window, data_refs=obs.data_refs,
        ))
    return claims


@dataclass(frozen=True)
class Candidate:
    """One visible source that speaks about the claim's field."""

    citations: tuple[str, ...]
    level: AccessLevel
    stat: str | None = None
    value: Any = None
    unit: str | None = None
    codes: tuple[tuple[float, str, str], ...] = ()  # (ts, code, source id)


def _same_window(a: Sequence[float] | None, b: Sequence[float] | None) -> bool:
    if a is None or b is None:
        return True
    return abs(a[0] - b[0]) <= 1.0 and abs(a[1] - b[1]) <= 1.0


def _inside(t: float, window: Sequence[float]) -> bool:
    return window[0] <= t < window[1]


def _feature_candidate(claim: Claim, f: Feature, snap_window) -> Candidate | None:
    if claim.relation == "occurred":
        if f.kind != "code":
            return None
        codes = tuple((t, c, i) for (t, c), i in zip(f.values, f.source_ids))
        return Candidate(f.source_ids, f.level, codes=codes)
    if not _same_window(claim.window, snap_window):
        return None
    value = None
    if f.level >= AccessLevel.AGGREGATE:
        value = getattr(f, claim.stat, None)
    return Candidate(f.source_ids, f.level, claim.stat, value, f.unit)


def _fact_candidate(claim: Claim, item: EvidenceItem, fact: Mapping[str, Any]) -> Candidate | None:
    if fact.get("path") != claim.field:
        return None
    level = AccessLevel.parse(fact.get("level", "none"))
    if claim.relation == "occurred":
        if fact.get("relation") != "occurred":
            return None
        w = fact.get("window")
        ts = fact.get("ts", w[0] if w else 0.0)
        return Candidate((item.id,), level, codes=((float(ts), str(fact.get("value")), item.id),))
    if fact.get("relation") != "=" or fact.get("stat") != claim.stat:
        return None
    if not _same_window(claim.window, fact.get("window")):
        return None
    return Candidate((item.id,), level, claim.stat, fact.get("value"), fact.get("unit"))


def find_evidence(claim: Claim, evidence: Iterable[EvidenceItem],
                  snapshot: ProfileSnapshot | None) -> list[Candidate]:
    """Snapshot features and evidence facts matching the claim's field and window."""
    out = []
    if snapshot is not None:
        f = snapshot.features.get(claim.field)
        if f is not None:
            snap_window = (snapshot.window.start, snapshot.window.end)
            c = _feature_candidate(claim, f, snap_window)
            if c is not None:
                out.append(c)
    for item in evidence:
        for fact in item.facts:
            c = _fact_candidate(claim, item, fact)
            if c is not None:
                out.append(c)
    return out


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= max(REL_TOL * abs(b), ABS_TOL)


def _as_unit(value: float, unit: str | None, target: str | None) -> float | None:
    if unit is None or target is None or unit == target:
        return float(value)
    try:
        return convert_unit(float(value), unit, target)
    except UnitError:
        return None


def _judge(claim: Claim, cand: Candidate) -> tuple[bool, tuple[str, ...]]:
    """(holds, citations) for one candidate already known to be visible enough."""
    if claim.relation == "occurred":
        hits = tuple(i for t, c, i in cand.codes if c == str(claim.value) and _inside(t, claim.window))
        return bool(hits), (hits or cand.citations)
    truth = cand.value
    if truth is None or (isinstance(truth, float) and math.isnan(truth)):
        return False, cand.citations
    if claim.relation == "trend_up":
        return truth > 0, cand.citations
    if claim.relation == "trend_down":
        return truth < 0, cand.citations
    claimed = _as_unit(claim.value, claim.unit, cand.unit)
    if claimed is None:
        return False, cand.citations
    if claim.relation == "=":
        return _close(claimed, float(truth)), cand.citations
    if claim.relation == ">":
        return float(truth) > claimed, cand.citations
    return float(truth) < claimed, cand.citations


def verify_claim(claim: Claim, evidence: Iterable[EvidenceItem], snapshot: ProfileSnapshot | None) -> Verdict:
    cands = find_evidence(claim, evidence, snapshot)
    cands = [c for c in cands if c.level > AccessLevel.NONE]
    if not cands:
        return Verdict(claim.id, "unverifiable", 0.0, reason=NOT_VISIBLE)
    need = required_level(claim)
    usable = [c for c in cands if c.level >= need]
    if not usable:
        return Verdict(claim.id, "unverifiable", 0.0, reason=INSUFFICIENT)
    conflicting: list[str] = []
    for c in usable:
        ok, cites = _judge(claim, c)
        if ok:
            return Verdict(claim.id, "supported", 1.0, citations=cites)
        conflicting.extend(x for x in cites if x not in conflicting)
    return Verdict(claim.id, "unsupported", 1.0, citations=tuple(conflicting), reason="value conflicts")


class OracleVerifier:
    """Default verification backend: exact checks over what the actor can see."""

    capabilities = frozenset({"verify"})
    signature = ORACLE_SIGNATURE

    def verify(self, claim: Claim, evidence: Sequence[EvidenceItem], snapshot: ProfileSnapshot | None) -> Verdict:
        return verify_claim(claim, evidence, snapshot)


def provenance_closure(draft: InsightDraft, evidence_ids: Iterable[str],
                       snapshot_source_ids: Iterable[str]) -> tuple[str, ...]:
    """References in the draft that point at nothing the turn supplied."""
    known = set(evidence_ids) | set(snapshot_source_ids)
    return tuple(sorted(r for r in draft.data_references if r not in known))
