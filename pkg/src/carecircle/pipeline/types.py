"""Wire types of the generate/verify pipeline."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..caregraph import Role
from ..vault.audit import canonical_json

RELATIONS = ("=", "<", ">", "trend_up", "trend_down", "occurred")
STATS = ("mean", "min", "max", "count", "latest", "delta")
CONFIDENCE = ("low", "medium", "high")
VERDICTS = ("supported", "unsupported", "unverifiable")


class SchemaError(ValueError):
    """A backend produced output that does not fit the draft schema."""


@dataclass(frozen=True)
class QueryRequest:
    actor: str
    subject: str
    query: str
    chat_context: tuple[tuple[str, str], ...] = ()
    k: int = 6
    scope: tuple[str, ...] | None = None  # requested field paths; None asks for everything

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not self.query.strip():
            raise ValueError("query must be non-empty")
        object.__setattr__(self, "chat_context", tuple(tuple(t) for t in self.chat_context))


@dataclass(frozen=True)
class EvidenceItem:
    """What the prompt carries for one retrieved entry."""

    id: str
    kind: str
    text: str
    score: float
    facts: tuple[Mapping[str, Any], ...] = ()

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "text": self.text, "score": self.score,
                "facts": [dict(f) for f in self.facts]}


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    output_schema: str
    role: Role
    evidence: tuple[EvidenceItem, ...] = ()

    def to_json(self) -> dict:
        return {
            "system": self.system,
            "user": self.user,
            "output_schema": self.output_schema,
            "role": self.role.value,
            "evidence": [e.to_json() for e in self.evidence],
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json())).hexdigest()


@dataclass(frozen=True)
class Observation:
    statement: str
    data_refs: tuple[str, ...]
    field: str | None = None
    stat: str | None = None
    relation: str | None = None
    value: Any = None
    unit: str | None = None
    window: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.data_refs:
            raise SchemaError(f"observation {self.statement!r} has no data references")
        if self.relation is not None and self.relation not in RELATIONS:
            raise SchemaError(f"unknown relation {self.relation!r}")
        object.__setattr__(self, "data_refs", tuple(self.data_refs))
        if self.window is not None:
            object.__setattr__(self, "window", (float(self.window[0]), float(self.window[1])))
        if self.relation is not None:
            if self.field is None:
                raise SchemaError(f"observation {self.statement!r}: relation without a field")
            if self.relation in ("=", "<", ">") and self.value is None:
                raise SchemaError(f"observation {self.statement!r}: comparison needs a value")
            if self.relation == "occurred" and (self.window is None or self.value is None):
                raise SchemaError(f"observation {self.statement!r}: occurrence needs a code and a window")
        if self.stat is not None and self.stat not in STATS:
            raise SchemaError(f"unknown stat {self.stat!r}")

    @property
    def is_claim(self) -> bool:
        return self.relation is not None and self.field is not None

    def to_json(self) -> dict:
        out: dict[str, Any] = {"statement": self.statement, "data_refs": list(self.data_refs)}
        for name in ("field", "stat", "relation", "value", "unit"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        if self.window is not None:
            out["window"] = list(self.window)
        return out

    @classmethod
    def from_json(cls, d: Mapping) -> "Observation":
        return cls(d["statement"], tuple(d.get("data_refs", ())), d.get("field"), d.get("stat"),
                   d.get("relation"), d.get("value"), d.get("unit"),
                   tuple(d["window"]) if d.get("window") else None)


@dataclass(frozen=True)
class Recommendation:
    action: str
    rationale: str
    data_refs: tuple[str, ...]

    def __post_init__(self):
        if not self.data_refs:
            raise SchemaError(f"recommendation {self.action!r} has no data references")
        object.__setattr__(self, "data_refs", tuple(self.data_refs))

    def to_json(self) -> dict:
        return {"action": self.action, "rationale": self.rationale, "data_refs": list(self.data_refs)}


@dataclass(frozen=True)
class InsightDraft:
    summary: str
    observations: tuple[Observation, ...] = ()
    recommendations: tuple[Recommendation, ...] = ()
    confidence: str = "low"

    def __post_init__(self):
        if self.confidence not in CONFIDENCE:
            raise SchemaError(f"unknown confidence {self.confidence!r}")

    @property
    def data_references(self) -> frozenset[str]:
        refs = {r for o in self.observations for r in o.data_refs}
        refs.update(r for rec in self.recommendations for r in rec.data_refs)
        return frozenset(refs)

    def to_json(self) -> dict:
        return {
            "summary": self.summary,
            "observations": [o.to_json() for o in self.observations],
            "recommendations": [r.to_json() for r in self.recommendations],
            "confidence": self.confidence,
            "data_references": sorted(self.data_references),
        }

    @classmethod
    def from_json(cls, d: Any) -> "InsightDraft":
        """Strict parse; anything malformed raises SchemaError."""
        if not isinstance(d, Mapping):
            raise SchemaError("draft must be a JSON object")
        try:
            draft = cls(
                summary=str(d["summary"]),
                observations=tuple(Observation.from_json(o) for o in d.get("observations", ())),
                recommendations=tuple(
                    Recommendation(r["action"], r.get("rationale", ""), tuple(r.get("data_refs", ())))
                    for r in d.get("recommendations", ())
                ),
                confidence=d.get("confidence", "low"),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise SchemaError(f"malformed draft: {exc}") from None
        return draft


OUTPUT_SCHEMA = (
    "Respond with one JSON object: {summary: str, observations: [{statement, data_refs: [id], "
    "field?, stat?, relation?, value?, unit?, window?: [start, end]}], recommendations: "
    "[{action, rationale, data_refs: [id]}], confidence: low|medium|high}. Cite only ids "
    "given in the evidence or snapshot."
)


@dataclass(frozen=True)
class Claim:
    id: str
    field: str
    relation: str
    value: Any = None
    unit: str | None = None
    stat: str = "mean"
    window: tuple[float, float] | None = None
    data_refs: tuple[str, ...] = ()

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise SchemaError(f"unknown relation {self.relation!r}")
        if self.relation in ("=", "<", ">") and self.value is None:
            raise SchemaError(f"claim {self.id}: comparison needs a value")
        if self.relation == "occurred" and self.window is None:
            raise SchemaError(f"claim {self.id}: occurrence needs a window")
        if self.stat not in STATS:
            raise SchemaError(f"claim {self.id}: unknown stat {self.stat!r}")

    def to_json(self) -> dict:
        return {"id": self.id, "field": self.field, "relation": self.relation, "value": self.value,
                "unit": self.unit, "stat": self.stat,
                "window": list(self.window) if self.window else None,
                "data_refs": list(self.data_refs)}


@dataclass(frozen=True)
class Verdict:
    claim_id: str
    status: str
    confidence: float
    citations: tuple[str, ...] = ()
    reason: str = ""

    def __post_init__(self):
        if self.status not in VERDICTS:
            raise SchemaError(f"unknown verdict {self.status!r}")
        if self.status != "unverifiable" and not self.citations:
            raise SchemaError(f"{self.status} verdict for {self.claim_id} needs a citation")
        if self.status == "unverifiable" and not self.reason:
            raise SchemaError(f"unverifiable verdict for {self.claim_id} needs a reason")
        if not 0.0 <= self.confidence <= 1.0:
            raise SchemaError("verdict confidence must lie in [0, 1]")

    def to_json(self) -> dict:
        return {"claim_id": self.claim_id, "status": self.status, "confidence": self.confidence,
                "citations": list(self.citations), "reason": self.reason}


@dataclass(frozen=True)
class ResponseContext:
    snapshot_id: str
    evidence_ids: tuple[str, ...]
    draft: InsightDraft
    claims: tuple[Claim, ...]
    verdicts: tuple[Verdict, ...]
    prompts: PromptBundle
    audit_record: str
    model_signature: str
    fallback: bool = False
    fabricated_refs: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "evidence_ids": list(self.evidence_ids),
            "draft": self.draft.to_json(),
            "claims": [c.to_json() for c in self.claims],
            "verdicts": [v.to_json() for v in self.verdicts],
            "prompt_hash": self.prompts.hash,
            "audit_record": self.audit_record,
            "model_signature": self.model_signature,
            "fallback": self.fallback,
            "fabricated_refs": list(self.fabricated_refs),
        }


@dataclass(frozen=True)
class Task:
    text: str
    field: str | None
    source_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class Briefing:
    audience: str
    role: Role
    text: str
    tasks: tuple[Task, ...]
    annotations: tuple[tuple[int, str, tuple[str, ...]], ...]  # (line, field, source ids)
    confidence: str
    snapshot_id: str = ""
    notify: bool = False
    fields: Mapping[str, str] = field(default_factory=dict)  # path -> level label rendered

    @property
    def id(self) -> str:
        return "br-" + hashlib.sha256(f"{self.audience}|{self.text}".encode()).hexdigest()[:24]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "audience": self.audience,
            "role": self.role.value,
            "text": self.text,
            "tasks": [{"text": t.text, "field": t.field, "source_ids": list(t.source_ids)} for t in self.tasks],
            "annotations": [[n, p, list(ids)] for n, p, ids in self.annotations],
            "confidence": self.confidence,
            "snapshot_id": self.snapshot_id,
            "notify": self.notify,
            "fields": dict(sorted(self.fields.items())),
        }
