"""Feature-hashing embeddings and an exact top-k cosine index."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

DIM = 256
KINDS = frozenset({"profile_item", "summary", "guideline", "prior_output"})
_TOKEN_RE = re.compile(r"[a-z0-9_]+")


class RetrievalError(ValueError):
    pass


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def _bucket(token: str, dim: int) -> tuple[int, float]:
    h = hashlib.blake2b(token.encode(), digest_size=8).digest()
    n = int.from_bytes(h, "little")
    return n % dim, (1.0 if (n >> 63) & 1 else -1.0)


def embed(text: str, dim: int = DIM) -> np.ndarray:
    """Signed feature hashing of word unigrams and bigrams, L2-normalised."""
    words = _TOKEN_RE.findall(normalize_text(text))
    if not words:
        raise RetrievalError("cannot embed empty text")
    vec = np.zeros(dim)
    grams = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
    for g in grams:
        i, sign = _bucket(g, dim)
        vec[i] += sign
    norm = np.linalg.norm(vec)
    if norm == 0:
        # every gram cancelled out; fall back to unsigned counts
        for g in grams:
            vec[_bucket(g, dim)[0]] += 1.0
        norm = np.linalg.norm(vec)
    return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass
class IndexEntry:
    id: str
    vector: np.ndarray
    kind: str
    updated_at: float
    text: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Evidence:
    id: str
    score: float
    kind: str


@dataclass(frozen=True)
class EvidenceSet:
    items: tuple[Evidence, ...]
    k: int

    def __post_init__(self):
        if len(self.items) > self.k:
            raise RetrievalError("evidence set larger than k")
        scores = [e.score for e in self.items]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise RetrievalError("evidence scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.items]

    def to_json(self) -> dict:
        return {"k": self.k, "items": [[e.id, e.score, e.kind] for e in self.items]}


class VectorIndex:
    """Exact cosine search over unit vectors. Reads see an immutable matrix
    snapshot; writes are serialised."""

    def __init__(self, dim: int = DIM):
        self.dim = dim
        self.entries: dict[str, IndexEntry] = {}
        self._lock = threading.Lock()
        self._clock = 0.0
        self._matrix: tuple[list[str], np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.entries

    def get(self, item_id: str) -> IndexEntry:
        return self.entries[item_id]

    def upsert(self, item_id: str, text: str, kind: str, updated_at: float | None = None,
               meta: Mapping[str, Any] | None = None) -> IndexEntry:
        return self.upsert_vector(item_id, embed(text, self.dim), kind, updated_at, meta, text)

    def upsert_vector(self, item_id: str, vector: np.ndarray, kind: str, updated_at: float | None = None,
                      meta: Mapping[str, Any] | None = None, text: str = "") -> IndexEntry:
        if kind not in KINDS:
            raise RetrievalError(f"unknown entry kind {kind!r}")
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.dim,):
            raise RetrievalError(f"vector dimension {vector.shape} != ({self.dim},)")
        norm = np.linalg.norm(vector)
        if not abs(norm - 1.0) <= 1e-6:
            vector = vector / norm
        with self._lock:
            self._clock = max(self._clock + 1.0, updated_at if updated_at is not None else 0.0)
            stamp = updated_at if updated_at is not None else self._clock
            entry = IndexEntry(item_id, vector, kind, float(stamp), text, dict(meta or {}))
            self.entries[item_id] = entry
            self._matrix = None
        return entry

    def remove(self, item_id: str) -> bool:
        with self._lock:
            if item_id not in self.entries:
                log.warning("remove: no index entry %s", item_id)
                return False
            del self.entries[item_id]
            self._matrix = None
            return True

    def _snapshot(self) -> tuple[list[str], np.ndarray, np.ndarray]:
        snap = self._matrix
        if snap is None:
            with self._lock:
                ids = sorted(self.entries)
                mat = np.array([self.entries[i].vector for i in ids]).reshape(len(ids), self.dim)
                upd = np.array([self.entries[i].updated_at for i in ids], dtype=float)
                snap = self._matrix = (ids, mat, upd)
        return snap

    def retrieve_top_k(
        self,
        query: np.ndarray,
        k: int,
        kinds: Iterable[str] | None = None,
        recency_tiebreak: bool = True,
        predicate: Callable[[IndexEntry], bool] | None = None,
    ) -> EvidenceSet:
        """Exact top-k. Ties fall to the most recently updated entry, then to id order."""
        if k < 1:
            raise RetrievalError("k must be at least 1")
        ids, mat, upd = self._snapshot()
        if not ids:
            return EvidenceSet((), k)
        scores = np.clip(mat @ np.asarray(query, dtype=float), -1.0, 1.0)
        keep = np.ones(len(ids), dtype=bool)
        if kinds is not None:
            kinds = set(kinds)
            keep &= np.array([self.entries[i].kind in kinds for i in ids])
        if predicate is not None:
            keep &= np.array([predicate(self.entries[i]) for i in ids])
        idx = np.flatnonzero(keep)
        if len(idx) == 0:
            return EvidenceSet((), k)
        rank = np.arange(len(ids))  # ids are sorted, so position is lexicographic order
        recency = -upd[idx] if recency_tiebreak else np.zeros(len(idx))
        order = np.lexsort((rank[idx], recency, -scores[idx]))[:k]
        chosen = idx[order]
        return EvidenceSet(
            tuple(Evidence(ids[i], float(scores[i]), self.entries[ids[i]].kind) for i in chosen), k
        )

    # -- persistence -------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "entries": [
                {
                    "id": e.id, "kind": e.kind, "updated_at": e.updated_at, "text": e.text,
                    "meta": e.meta,
                    "vector": base64.b64encode(e.vector.astype("<f8").tobytes()).decode(),
                }
                for e in sorted(self.entries.values(), key=lambda e: e.id)
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "VectorIndex":
        idx = cls(int(data["dim"]))
        for e in data["entries"]:
            vec = np.frombuffer(base64.b64decode(e["vector"]), dtype="<f8").copy()
            idx.entries[e["id"]] = IndexEntry(e["id"], vec, e["kind"], float(e["updated_at"]),
                                              e.get("text", ""), e.get("meta", {}))
            idx._clock = max(idx._clock, float(e["updated_at"]))
        return idx

    def save_sealed(self, vault, record_id: str, scope: str = "local", partition: str = "index") -> None:
        body = json.dumps(self.to_json(), sort_keys=True).encode()
        vault.put(scope, record_id, body, partition=partition)

    @classmethod
    def load_sealed(cls, vault, record_id: str, scope: str = "local") -> "VectorIndex":
        return cls.from_json(json.loads(vault.get(scope, record_id)))

