"""Model backends: a seeded mock with fault injection, and an HTTP client."""
from __future__ import annotations

import hashlib
import json
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol

import numpy as np

from .types import (EvidenceItem, InsightDraft, Observation, PromptBundle, Recommendation, SchemaError,
                    Verdict)
from .verify import OracleVerifier

DECOY_SUFFIX = "_decoy"


class BackendUnavailable(RuntimeError):
    pass


class ModelBackend(Protocol):
    capabilities: frozenset[str]
    signature: str

    def generate(self, prompt: PromptBundle) -> InsightDraft: ...


def signature_for(name: str, version: str, params: Mapping[str, Any]) -> str:
    h = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:12]
    return f"{name}/{version}+{h}"


@dataclass(frozen=True)
class ManifestEntry:
    """Ground truth for one emitted observation."""

    index: int
    evidence_id: str
    emitted_ref: str
    path: str
    stat: str
    relation: str
    window: tuple[float, float] | None
    fabricated: bool
    corrupted: bool

    def to_json(self) -> dict:
        return {"index": self.index, "evidence_id": self.evidence_id, "emitted_ref": self.emitted_ref,
                "path": self.path, "stat": self.stat, "relation": self.relation,
                "window": list(self.window) if self.window else None,
                "fabricated": self.fabricated, "corrupted": self.corrupted}


@dataclass(frozen=True)
class TurnManifest:
    call: int
    prompt_hash: str
    entries: tuple[ManifestEntry, ...]


def _pick_fact(facts, rng: np.random.Generator) -> Mapping[str, Any]:
    return facts[int(rng.integers(len(facts)))] if len(facts) > 1 else facts[0]


def _observation_from_fact(fact: Mapping[str, Any]) -> tuple[str, Any, str]:
    """(relation, value, stat) a faithful model would state for ``fact``."""
    stat = fact.get("stat", "mean")
    if fact.get("relation") == "occurred":
        return "occurred", fact["value"], "mean"
    truth = float(fact["value"])
    if stat == "delta":
        return ("trend_up" if truth > 0 else "trend_down"), None, "delta"
    return "=", truth, stat


def _corrupt(relation: str, value: Any, rng: np.random.Generator) -> tuple[str, Any]:
    if relation == "=":
        shift = float(rng.uniform(0.1, 0.3)) * (1 if rng.random() < 0.5 else -1)
        v = float(value)
        return "=", (v + shift if v == 0 else v * (1 + shift))
    if relation in (">", "<"):
        return ("<" if relation == ">" else ">"), value
    if relation == "trend_up":
        return "trend_down", value
    if relation == "trend_down":
        return "trend_up", value
    return "occurred", f"{value}{DECOY_SUFFIX}"


@dataclass
class MockInsightsBackend:
    """Echoes the prompt's evidence as structured observations, fabricating
    references at rate ``r`` and corrupting claim values at rate ``q``.

    Randomness is keyed on (seed, call number, prompt hash) so a run is fully
    determined by its seed and the order of calls.
    """

    seed: int = 0
    r: float = 0.0
    q: float = 0.0
    available: bool = True
    delay_s: float = 0.0
    use_thresholds: bool = False
    manifest: list[TurnManifest] = field(default_factory=list)
    capabilities: frozenset[str] = frozenset({"generate"})
    keep_manifest: bool = True

    def __post_init__(self):
        if not (0.0 <= self.r <= 1.0 and 0.0 <= self.q <= 1.0):
            raise ValueError("fault rates must lie in [0, 1]")
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def signature(self) -> str:
        return signature_for("mock-insights", "1", {"seed": self.seed, "r": self.r, "q": self.q})

    def generate(self, prompt: PromptBundle) -> InsightDraft:
        if self.delay_s:
            time.sleep(self.delay_s)
        if not self.available:
            raise BackendUnavailable("mock backend switched off")
        with self._lock:
            call = self._calls
            self._calls += 1
        phash = prompt.hash
        rng = np.random.default_rng([self.seed, call, int(phash[:15], 16)])
        known = {e.id for e in prompt.evidence}
        observations: list[Observation] = []
        recs: list[Recommendation] = []
        entries: list[ManifestEntry] = []
        for item in prompt.evidence:
            if item.kind == "guideline":
                recs.append(Recommendation(f"Review guidance {item.id}", item.text[:80], (item.id,)))
                continue
            if not item.facts:
                continue
            fact = _pick_fact(item.facts, rng)
            relation, value, stat = _observation_from_fact(fact)
            if self.use_thresholds and relation == "=" and stat in ("mean", "min", "max") and rng.random() < 0.5:
                truth = float(value)
                relation, value = ">", (round(truth * 0.9, 1) if truth > 0 else -1.0)
            fabricated = bool(rng.random() < self.r)
            corrupted = bool(rng.random() < self.q)
            if corrupted:
                relation, value = _corrupt(relation, value, rng)
            ref = item.id
            if fabricated:
                ref = _fresh_id(rng, known)
            window = tuple(fact["window"]) if fact.get("window") else None
            statement = _statement(fact["path"], stat, relation, value, fact.get("unit"))
            observations.append(Observation(statement, (ref,), fact["path"], stat, relation,
                                            value, fact.get("unit"), window))
            entries.append(ManifestEntry(len(observations) - 1, item.id, ref, fact["path"], stat, relation,
                                         window, fabricated, corrupted))
        if self.keep_manifest:
            with self._lock:
                self.manifest.append(TurnManifest(call, phash, tuple(entries)))
        summary = f"{len(observations)} observations drawn from {len(prompt.evidence)} evidence items."
        return InsightDraft(summary, tuple(observations), tuple(recs), "medium" if observations else "low")


def _fresh_id(rng: np.random.Generator, known: set[str]) -> str:
    while True:
        cand = "ev-" + bytes(rng.integers(0, 256, 8, dtype=np.uint8)).hex()
        if cand not in known:
            return cand


def _statement(path: str, stat: str, relation: str, value: Any, unit: str | None) -> str:
    if relation == "occurred":
        return f"{path} recorded {value}"
    if relation.startswith("trend"):
        return f"{path} is trending {relation.split('_')[1]}"
    u = f" {unit}" if unit else ""
    return f"{path} {stat} {relation} {value}{u}"


@dataclass
class RemoteBackend:
    """JSON-over-HTTP model endpoint. Any transport or schema failure is
    surfaced as BackendUnavailable or SchemaError so the engine can fall back."""

    endpoint: str
    model: str
    temperature: float = 0.2
    verify_temperature: float = 0.0
    timeout_s: float = 30.0
    capabilities: frozenset[str] = frozenset({"generate", "verify"})

    @property
    def signature(self) -> str:
        return signature_for(self.model, "remote", {"endpoint": self.endpoint, "temperature": self.temperature})

    def _post(self, route: str, body: Mapping[str, Any]) -> Any:
        req = urllib.request.Request(
            self.endpoint.rstrip("/") + route, data=json.dumps(body).encode(),
            headers={"Content-Type": "application/json"}, method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                raw = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise BackendUnavailable(f"{self.endpoint}: {exc}") from None
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            raise SchemaError("backend returned non-JSON output") from None

    def generate(self, prompt: PromptBundle) -> InsightDraft:
        out = self._post("/generate", {"model": self.model, "temperature": self.temperature,
                                       "prompt": prompt.to_json()})
        return InsightDraft.from_json(out)

    def verify(self, claim, evidence: list[EvidenceItem], snapshot) -> Verdict:
        out = self._post("/verify", {
            "model": self.model, "temperature": self.verify_temperature, "claim": claim.to_json(),
            "evidence": [e.to_json() for e in evidence],
            "snapshot": snapshot.to_json() if snapshot is not None else None,
        })
        try:
            return Verdict(out["claim_id"], out["status"], float(out["confidence"]),
                           tuple(out.get("citations", ())), out.get("reason", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed verdict: {exc}") from None


__all__ = [
    "BackendUnavailable", "ManifestEntry", "MockInsightsBackend", "ModelBackend", "OracleVerifier",
    "RemoteBackend", "TurnManifest", "signature_for", "DECOY_SUFFIX",
]
