"""Hash-chained, append-only audit log partitioned per care circle.

Each record's digest covers its full content, including the payload, and the
next record stores that digest as ``prev_hash``. An anchored head hash lets
verification catch tampering with the final record as well.
"""
from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

AUDIT_KINDS = frozenset({"grant", "revoke", "ingest", "llm_turn", "rotation", "wipe"})
GENESIS = "0" * 64

_KEY_RE = re.compile(r"^[a-z][a-z0-9_]*$")
# ids, hashes and short enum labels; no whitespace, so no free text slips through
_TOKEN_RE = re.compile(r"^[A-Za-z0-9_.:/@+\-]{1,160}$")


class AuditError(ValueError):
    pass


class AuditPayloadError(AuditError):
    pass


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def check_payload(payload: Mapping[str, Any]) -> None:
    """Audit payloads may hold only ids, hashes, labels and counts.

    Floats are refused outright so that no measured value can be logged.
    """
    for key, value in payload.items():
        if not _KEY_RE.match(key):
            raise AuditPayloadError(f"bad payload key {key!r}")
        values = value if isinstance(value, (list, tuple)) else [value]
        for v in values:
            if v is None or isinstance(v, bool):
                continue
            if isinstance(v, int):
                continue
            if isinstance(v, str) and _TOKEN_RE.match(v):
                continue
            raise AuditPayloadError(f"payload key {key!r} carries a non-reference value {v!r}")


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    prev_hash: str
    payload_hash: str
    kind: str
    ts: float
    payload: Mapping[str, Any] = field(default_factory=dict)
    prompt_hash: str | None = None
    retrieved_ids: tuple[str, ...] = ()
    model_signature: str | None = None

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "prev_hash": self.prev_hash,
            "payload_hash": self.payload_hash,
            "kind": self.kind,
            "ts": self.ts,
            "payload": dict(self.payload),
            "prompt_hash": self.prompt_hash,
            "retrieved_ids": list(self.retrieved_ids),
            "model_signature": self.model_signature,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "AuditRecord":
        return cls(
            seq=int(data["seq"]),
            prev_hash=data["prev_hash"],
            payload_hash=data["payload_hash"],
            kind=data["kind"],
            ts=float(data["ts"]),
            payload=dict(data.get("payload", {})),
            prompt_hash=data.get("prompt_hash"),
            retrieved_ids=tuple(data.get("retrieved_ids", ())),
            model_signature=data.get("model_signature"),
        )

    def digest(self) -> str:
        return sha256_hex(canonical_json(self.to_json()))


def payload_hash(payload: Mapping[str, Any]) -> str:
    return sha256_hex(canonical_json(dict(payload)))


@dataclass(frozen=True)
class ChainVerdict:
    ok: bool
    first_bad_seq: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_chain(records: Sequence[AuditRecord], expected_head: str | None = None) -> ChainVerdict:
    """Linear scan; reports the first position whose record is out of place or
    whose link to its predecessor is broken."""
    prev = GENESIS
    for i, rec in enumerate(records):
        if rec.seq != i:
            return ChainVerdict(False, i, f"expected seq {i}, found {rec.seq}")
        if rec.kind not in AUDIT_KINDS:
            return ChainVerdict(False, i, f"unknown kind {rec.kind!r}")
        if rec.payload_hash != payload_hash(rec.payload):
            return ChainVerdict(False, i, "payload does not match payload_hash")
        if rec.prev_hash != prev:
            return ChainVerdict(False, i, "prev_hash does not match predecessor")
        prev = rec.digest()
    if expected_head is not None and prev != expected_head:
        return ChainVerdict(False, len(records), "head hash does not match anchor")
    return ChainVerdict(True)


class AuditChain:
    """One partition. A single writer appends; ``path`` makes it durable as JSON lines."""

    def __init__(self, name: str = "system", path: Path | None = None):
        self.name = name
        self.path = path
        self.records: list[AuditRecord] = []
        self.head = GENESIS
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.records)

    def append(
        self,
        kind: str,
        payload: Mapping[str, Any],
        ts: float,
        *,
        prompt_hash: str | None = None,
        retrieved_ids: Iterable[str] = (),
        model_signature: str | None = None,
    ) -> AuditRecord:
        if kind not in AUDIT_KINDS:
            raise AuditError(f"unknown audit kind {kind!r}")
        check_payload(payload)
        retrieved = tuple(retrieved_ids)
        check_payload({"retrieved_ids": list(retrieved)})
        with self._lock:
            rec = AuditRecord(
                seq=len(self.records),
                prev_hash=self.head,
                payload_hash=payload_hash(payload),
                kind=kind,
                ts=float(ts),
                payload=dict(payload),
                prompt_hash=prompt_hash,
                retrieved_ids=retrieved,
                model_signature=model_signature,
            )
            self._commit(rec)
            return rec

    def append_record(self, rec: AuditRecord) -> str:
        """Append a pre-built record; returns the new head."""
        with self._lock:
            if rec.seq != len(self.records):
                raise AuditError(f"gap in seq: expected {len(self.records)}, got {rec.seq}")
            if rec.prev_hash != self.head:
                raise AuditError(f"prev_hash mismatch at seq {rec.seq}")
            if rec.payload_hash != payload_hash(rec.payload):
                raise AuditError(f"payload hash mismatch at seq {rec.seq}")
            check_payload(rec.payload)
            self._commit(rec)
            return self.head

    def _commit(self, rec: AuditRecord) -> None:
        self.records.append(rec)
        self.head = rec.digest()
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

    def verify(self) -> ChainVerdict:
        return verify_chain(self.records, self.head)

    def count(self, kind: str) -> int:
        return sum(1 for r in self.records if r.kind == kind)


def read_chain(path: Path) -> list[AuditRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(AuditRecord.from_json(json.loads(line)))
    return out


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


class AuditLedger:
    """Partitioned audit: one chain per care circle plus a ``system`` chain."""

    HEADS_FILE = "heads.json"

    def __init__(self, root: Path | str | None = None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self.chains: dict[str, AuditChain] = {}
        self._lock = threading.Lock()

    def chain(self, partition: str) -> AuditChain:
        with self._lock:
            if partition not in self.chains:
                path = None
                if self.root is not None:
                    path = self.root / f"{_safe_name(partition)}.jsonl"
                self.chains[partition] = AuditChain(partition, path)
            return self.chains[partition]

    def append(self, partition: str, kind: str, payload: Mapping[str, Any], ts: float, **llm) -> AuditRecord:
        rec = self.chain(partition).append(kind, payload, ts, **llm)
        if self.root is not None:
            self._write_heads()
        return rec

    def _write_heads(self) -> None:
        heads = {name: c.head for name, c in sorted(self.chains.items())}
        (self.root / self.HEADS_FILE).write_text(json.dumps(heads, indent=2, sort_keys=True))

    def verify_all(self) -> dict[str, ChainVerdict]:
        return {name: c.verify() for name, c in sorted(self.chains.items())}

    def records(self, kind: str | None = None) -> list[AuditRecord]:
        out = []
        for _, c in sorted(self.chains.items()):
            out.extend(r for r in c.records if kind is None or r.kind == kind)
        return out

    def count(self, kind: str) -> int:
        return sum(c.count(kind) for c in self.chains.values())


def verify_path(path: Path | str) -> dict[str, ChainVerdict]:
    """Verify a chain file, or every ``*.jsonl`` in a ledger directory
    (anchored against ``heads.json`` when present)."""
    path = Path(path)
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    heads_file = (path if path.is_dir() else path.parent) / AuditLedger.HEADS_FILE
    heads = json.loads(heads_file.read_text()) if heads_file.exists() else {}
    by_file = {_safe_name(name): head for name, head in heads.items()}
    out = {}
    for f in files:
        try:
            records = read_chain(f)
        except (ValueError, KeyError) as exc:
            out[f.stem] = ChainVerdict(False, None, f"unreadable: {exc}")
            continue
        out[f.stem] = verify_chain(records, by_file.get(f.stem))
    return out
