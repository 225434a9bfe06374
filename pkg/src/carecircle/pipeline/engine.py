"""The care engine: query turns (generate then verify) and per-actor briefings."""
from __future__ import annotations

import concurrent.futures as cf
import json
import logging
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, Mapping

from ..caregraph import AccessLevel, CareCircle, CareGraph, GraphError, PermissionSet, Role, filter_fields
from ..ontology import OntologySchema
from ..profile import (NO_SHARED_DATA, FeatureSet, ProfileSnapshot, ProfileStore, TimeWindow, build_snapshot,
                       enrich_features)
from ..render import exposure_diff, feature_line, scan_rendering
from ..retrieval import VectorIndex, embed
from .backends import BackendUnavailable
from .evidence import acl_predicate, evidence_items, index_prior_output, index_profile
from .templates import TemplateError, TemplateSet, extract_tasks, template_fill
from .types import (OUTPUT_SCHEMA, Briefing, InsightDraft, Observation, PromptBundle, QueryRequest,
                    ResponseContext, SchemaError)
from .verify import OracleVerifier, extract_claims, provenance_closure

log = logging.getLogger(__name__)

FALLBACK_SIGNATURE = "fallback/v1"
FALLBACK_REFS = 3


class RateLimitExceeded(RuntimeError):
    def __init__(self, actor: str, retry_after: float):
        super().__init__(f"rate limit for {actor}; retry after {retry_after:.1f} s")
        self.actor = actor
        self.retry_after = retry_after


class ConsentDenied(PermissionError):
    pass


class RateLimiter:
    """At most ``budget`` calls per actor in any sliding ``window_s``."""

    def __init__(self, budget: int, window_s: float):
        if budget < 1 or window_s <= 0:
            raise ValueError("budget must be >= 1 and window positive")
        self.budget = budget
        self.window_s = window_s
        self._calls: dict[str, deque] = defaultdict(deque)
        self._lock = threading.Lock()

    def acquire(self, actor: str, now: float) -> None:
        with self._lock:
            q = self._calls[actor]
            while q and q[0] <= now - self.window_s:
                q.popleft()
            if len(q) >= self.budget:
                raise RateLimitExceeded(actor, q[0] + self.window_s - now)
            q.append(now)


@dataclass
class EnginePolicy:
    k: int = 6
    rate_budget: int = 30
    rate_window_s: float = 60.0
    timeout_s: float = 30.0
    token_budget: int = 1200
    min_count: int = 3
    max_workers: int = 4


def estimate_confidence(features: FeatureSet, min_count: int = 3) -> str:
    """high: under 10% missing and every measured field has enough readings;
    medium: under 30% missing; low otherwise or with nothing at all."""
    if not features.features or not features.source_ids():
        return "low"
    mf = features.missing_fraction
    counts = [f.count for f in features.features.values() if f.kind == "quantity" and f.count is not None]
    if mf < 0.1 and all(c >= min_count for c in counts):
        return "high"
    if mf < 0.3:
        return "medium"
    return "low"


def needs_notification(features: Mapping[str, object], mad_multiple: float = 3.0) -> bool:
    for f in features.values():
        if f.flag == "urgent":
            return True
        if f.delta is not None and f.baseline_mad and abs(f.delta) > mad_multiple * f.baseline_mad:
            return True
    return False


def load_guidelines(text: str | None = None) -> list[dict]:
    if text is None:
        text = resources.files("carecircle.data").joinpath("guidelines.json").read_text("utf-8")
    return json.loads(text)["guidelines"]


@dataclass
class BriefingRejection:
    audience: str
    role: Role
    leaks: list[tuple[str, str, str]]
    reason: str


class CareEngine:
    """Holds per-subject stores and indexes; everything else is borrowed."""

    def __init__(
        self,
        schema: OntologySchema,
        graph: CareGraph,
        templates: TemplateSet,
        backend,
        verifier=None,
        ledger=None,
        policy: EnginePolicy | None = None,
        clock: Callable[[], float] = time.time,
        guidelines: Iterable[Mapping] | None = None,
    ):
        self.schema = schema
        self.graph = graph
        self.templates = templates
        self.backend = backend
        self.verifier = verifier or OracleVerifier()
        self.ledger = ledger
        self.policy = policy or EnginePolicy()
        self.clock = clock
        self.guidelines = list(load_guidelines() if guidelines is None else guidelines)
        self.stores: dict[str, ProfileStore] = {}
        self.indexes: dict[str, VectorIndex] = {}
        self.windows: dict[str, TimeWindow] = {}
        self.limiter = RateLimiter(self.policy.rate_budget, self.policy.rate_window_s)
        self.notifications: list[tuple[str, str]] = []
        self.rejections: list[BriefingRejection] = []
        self._actor_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        self._pool = cf.ThreadPoolExecutor(max_workers=self.policy.max_workers, thread_name_prefix="backend")

    def close(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)

    def add_store(self, store: ProfileStore, window: TimeWindow | None = None, index: bool = True) -> None:
        self.stores[store.subject] = store
        self.indexes.setdefault(store.subject, VectorIndex())
        if window is not None:
            self.windows[store.subject] = window
            if index:
                index_profile(self.indexes[store.subject], store, window, self.templates.labels, self.guidelines)

    def _partition(self, subject: str) -> str:
        c = self.graph.circle_of_subject(subject)
        return c.id if c is not None else "system"

    def _actor_lock(self, actor: str) -> threading.Lock:
        with self._locks_guard:
            return self._actor_locks[actor]

    # -- query turns -----------------------------------------------------------------

    def _gate(self, request: QueryRequest, now: float) -> Role:
        self.graph.actor_profile(request.actor)
        if request.subject not in self.stores:
            raise GraphError(f"no profile store for subject {request.subject}")
        role = self.graph.role_of(request.actor, request.subject)
        if role is None:
            raise ConsentDenied(f"{request.actor} shares no circle with {request.subject}")
        self.limiter.acquire(request.actor, now)
        return role

    def _snapshot(self, request: QueryRequest, perm: PermissionSet, window: TimeWindow | None) -> ProfileSnapshot:
        store = self.stores[request.subject]
        return build_snapshot(store, perm, request.chat_context, window or self.windows.get(request.subject),
                              self.policy.token_budget)

    def build_context(self, request: QueryRequest, window: TimeWindow | None = None) -> ResponseContext:
        now = self.clock()
        role = self._gate(request, now)
        with self._actor_lock(request.actor):
            perm = self.graph.apply_acls(request.actor, request.subject, request.scope, now)
            snapshot = self._snapshot(request, perm, window)
            hint_words = " ".join(p.split(".", 1)[1].replace("_", " ") for p in snapshot.topic_hints)
            qvec = embed(f"{request.query} {hint_words}".strip())
            index = self.indexes[request.subject]
            found = index.retrieve_top_k(qvec, request.k, predicate=acl_predicate(perm))
            evidence = evidence_items(index, found)
            prompt = self._prompt(request, role, snapshot, evidence)
            try:
                draft = self._generate(prompt)
            except (BackendUnavailable, SchemaError, cf.TimeoutError) as exc:
                log.warning("backend failed for %s: %s; using fallback", request.actor, exc)
                return self._fallback_context(request, snapshot, evidence, prompt, now)
            claims = extract_claims(draft)
            verdicts = tuple(self.verifier.verify(c, evidence, snapshot) for c in claims)
            fabricated = provenance_closure(draft, found.ids, snapshot.source_ids())
            rec = self._audit_turn(request, snapshot, prompt, found.ids, self.backend.signature, now,
                                   n_claims=len(claims), fabricated=len(fabricated), fallback=False)
            return ResponseContext(snapshot.id, tuple(found.ids), draft, tuple(claims), verdicts, prompt,
                                   rec, self.backend.signature, False, fabricated)

    def _prompt(self, request: QueryRequest, role: Role, snapshot: ProfileSnapshot, evidence) -> PromptBundle:
        ev_text = "\n".join(f"[{e.id}] {e.text}" for e in evidence) or "(none)"
        user = f"Query: {request.query}\n\nContext:\n{snapshot.text}\n\nEvidence:\n{ev_text}"
        return PromptBundle(self.templates.persona(role), user, OUTPUT_SCHEMA, role, tuple(evidence))

    def _generate(self, prompt: PromptBundle) -> InsightDraft:
        fut = self._pool.submit(self.backend.generate, prompt)
        try:
            draft = fut.result(timeout=self.policy.timeout_s)
        except cf.TimeoutError:
            fut.cancel()
            raise
        if not isinstance(draft, InsightDraft):
            raise SchemaError("backend did not return an InsightDraft")
        return draft

    def _audit_turn(self, request: QueryRequest, snapshot: ProfileSnapshot, prompt: PromptBundle,
                    retrieved: list[str], signature: str, now: float, **counts) -> str:
        payload = {"op": "query", "actor_id": request.actor, "subject_id": request.subject,
                   "snapshot_id": snapshot.id, **counts}
        if self.ledger is None:
            return ""
        rec = self.ledger.append(self._partition(request.subject), "llm_turn", payload, now,
                                 prompt_hash=prompt.hash, retrieved_ids=retrieved, model_signature=signature)
        return f"{self._partition(request.subject)}:{rec.seq}"

    def _fallback_context(self, request, snapshot, evidence, prompt, now) -> ResponseContext:
        draft = fallback_draft(snapshot, self.templates.labels)
        rec = self._audit_turn(request, snapshot, prompt, [e.id for e in evidence], FALLBACK_SIGNATURE, now,
                               n_claims=0, fabricated=0, fallback=True)
        return ResponseContext(snapshot.id, tuple(e.id for e in evidence), draft, (), (), prompt, rec,
                               FALLBACK_SIGNATURE, True, ())

    def fallback_guidance(self, request: QueryRequest, window: TimeWindow | None = None) -> ResponseContext:
        """Deterministic answer from snapshot aggregates alone; no model calls."""
        now = self.clock()
        role = self._gate(request, now)
        with self._actor_lock(request.actor):
            perm = self.graph.apply_acls(request.actor, request.subject, request.scope, now)
            snapshot = self._snapshot(request, perm, window)
            prompt = self._prompt(request, role, snapshot, ())
            return self._fallback_context(request, snapshot, (), prompt, now)

    # -- briefings --------------------------------------------------------------------

    def generate_briefings(self, subject: str, window: TimeWindow, now: float | None = None,
                           circle: CareCircle | None = None) -> dict[str, Briefing]:
        store = self.stores[subject]
        circle = circle or self.graph.circle_of_subject(subject)
        if circle is None:
            raise GraphError(f"no circle has subject {subject}")
        return generate_briefings(store, circle, self.templates, window, self.graph,
                                  self.indexes.setdefault(subject, VectorIndex()),
                                  now=self.clock() if now is None else now, ledger=self.ledger,
                                  min_count=self.policy.min_count, engine=self)


def fallback_draft(snapshot: ProfileSnapshot, labels: Mapping[str, str] | None = None) -> InsightDraft:
    """Visible aggregates, never above aggregate detail, without any claims."""
    labels = labels or {}
    obs = []
    for path, f in sorted(snapshot.features.items()):
        if not f.source_ids:
            continue
        shown = f.at_level(AccessLevel.AGGREGATE)
        obs.append(Observation(feature_line(shown, labels.get(path), bullet=""), f.source_ids[:FALLBACK_REFS]))
    summary = "Model unavailable; showing shared aggregates only." if obs else NO_SHARED_DATA
    return InsightDraft(summary, tuple(obs), (), "low")


def generate_briefings(
    store: ProfileStore,
    circle: CareCircle,
    templates: TemplateSet,
    window: TimeWindow,
    graph: CareGraph,
    index: VectorIndex,
    now: float,
    ledger=None,
    min_count: int = 3,
    engine: CareEngine | None = None,
) -> dict[str, Briefing]:
    """One briefing per circle member, each limited to that member's permissions."""
    for _, role in circle.members:
        templates[role]  # raises TemplateError before any work
    features = enrich_features(store, window)
    confidence = estimate_confidence(features, min_count)
    out: dict[str, Briefing] = {}
    for actor in sorted(circle.actors()):
        role = circle.role_of(actor)
        template = templates[role]
        perm = graph.resolve_permissions(actor, circle.subject, now)
        allowed = {p: perm.level(p) for p in perm.fields}
        filtered = filter_fields(features, perm).features
        filled = template_fill(template, filtered, allowed, graph.schema, templates.labels,
                               subject=circle.subject, window=window)
        tasks = tuple(extract_tasks(filled.text, template, filtered))
        scanned = scan_rendering(filled.text)
        leaks = exposure_diff(scanned, allowed)
        if leaks:
            _reject(ledger, engine, circle, actor, role, leaks, "exposure check failed", now)
            continue
        brief = Briefing(actor, role, filled.text, tasks, filled.annotations, confidence,
                         fields={p: lvl.label for p, lvl in sorted(scanned.items())},
                         notify=needs_notification(filtered))
        try:
            sid = store.store_snapshot(actor, window, brief.to_json())
        except Exception as exc:  # storage backends vary; any failure withholds the briefing
            _reject(ledger, engine, circle, actor, role, [], f"storage failed: {type(exc).__name__}", now)
            continue
        brief = Briefing(actor, role, brief.text, tasks, brief.annotations, confidence, sid, brief.notify,
                         brief.fields)
        index_prior_output(index, circle.subject, actor, brief.id, brief.text, now)
        if brief.notify and engine is not None:
            engine.notifications.append((actor, brief.id))
        out[actor] = brief
    return out


def _reject(ledger, engine, circle: CareCircle, actor: str, role: Role, leaks, reason: str, now: float) -> None:
    log.error("briefing for %s withheld: %s %s", actor, reason, leaks)
    if engine is not None:
        engine.rejections.append(BriefingRejection(actor, role, list(leaks), reason))
    if ledger is not None:
        ledger.append(circle.id, "llm_turn", {
            "op": "briefing", "status": "rejected", "actor_id": actor, "subject_id": circle.subject,
            "leaked_fields": [p for p, _, _ in leaks], "reason": reason.split(":")[0].replace(" ", "_"),
        }, now, model_signature="template/v1")


__all__ = [
    "BriefingRejection", "CareEngine", "ConsentDenied", "EnginePolicy", "FALLBACK_SIGNATURE", "RateLimitExceeded",
    "RateLimiter", "TemplateError", "estimate_confidence", "fallback_draft", "generate_briefings",
    "load_guidelines", "needs_notification",
]
