"""Sealed record storage: AES-256-GCM per record, data keys wrapped under a
passphrase-derived master key, resumable rotation and scope revocation."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.keywrap import InvalidUnwrap, aes_key_unwrap, aes_key_wrap

log = logging.getLogger(__name__)

NONCE_BYTES = 12
KEY_BYTES = 32


class VaultError(Exception):
    pass


class AuthenticationError(VaultError):
    """Ciphertext, nonce or associated data failed authentication."""


class UnknownKeyError(VaultError, KeyError):
    pass


class KeyDestroyedError(UnknownKeyError):
    pass


def derive_master_key(passphrase: str | bytes, salt: bytes) -> bytes:
    if isinstance(passphrase, str):
        passphrase = passphrase.encode()
    return hashlib.scrypt(passphrase, salt=salt, n=2**14, r=8, p=1, dklen=KEY_BYTES)


@dataclass
class KeyEntry:
    key_id: str
    wrapped: bytes | None
    created: float
    retired: float | None = None

    @property
    def destroyed(self) -> bool:
        return self.wrapped is None


class KeyRing:
    """One active data key at a time; retired keys stay until rewrap completes."""

    def __init__(self, master_key: bytes, salt: bytes, scope: str = "local"):
        self._master = master_key
        self.salt = salt
        self.scope = scope
        self.keys: dict[str, KeyEntry] = {}
        self.active_key_id: str | None = None
        self._used_nonces: dict[str, set[bytes]] = {}
        self._plain: dict[str, bytes] = {}

    @classmethod
    def create(cls, passphrase: str | bytes, scope: str = "local", salt: bytes | None = None,
               now: float = 0.0) -> "KeyRing":
        salt = salt if salt is not None else os.urandom(16)
        ring = cls(derive_master_key(passphrase, salt), salt, scope)
        ring.new_key(now)
        return ring

    @classmethod
    def from_env(cls, var: str = "CARECIRCLE_PASSPHRASE", scope: str = "local") -> "KeyRing":
        try:
            return cls.create(os.environ[var], scope)
        except KeyError:
            raise VaultError(f"environment variable {var} is not set") from None

    def new_key(self, now: float) -> str:
        key_id = f"{self.scope}-k{len(self.keys):04d}"
        raw = AESGCM.generate_key(bit_length=256)
        self.keys[key_id] = KeyEntry(key_id, aes_key_wrap(self._master, raw), now)
        self.active_key_id = key_id
        return key_id

    def data_key(self, key_id: str) -> bytes:
        entry = self.keys.get(key_id)
        if entry is None:
            raise UnknownKeyError(key_id)
        if entry.destroyed:
            raise KeyDestroyedError(key_id)
        if key_id not in self._plain:
            try:
                self._plain[key_id] = aes_key_unwrap(self._master, entry.wrapped)
            except InvalidUnwrap:
                raise AuthenticationError(f"cannot unwrap {key_id}: wrong master key") from None
        return self._plain[key_id]

    def fresh_nonce(self, key_id: str) -> bytes:
        used = self._used_nonces.setdefault(key_id, set())
        while True:
            nonce = os.urandom(NONCE_BYTES)
            if nonce not in used:
                used.add(nonce)
                return nonce

    def retire(self, key_id: str, now: float) -> None:
        entry = self.keys[key_id]
        if entry.retired is None:
            entry.retired = now

    def destroy(self, key_id: str) -> None:
        entry = self.keys.get(key_id)
        if entry is None:
            raise UnknownKeyError(key_id)
        entry.wrapped = None
        self._plain.pop(key_id, None)
        if self.active_key_id == key_id:
            self.active_key_id = None

    def live_keys(self) -> list[str]:
        return [k for k, e in self.keys.items() if not e.destroyed]

    @property
    def history(self) -> list[tuple[str, float, float | None]]:
        return [(e.key_id, e.created, e.retired) for e in self.keys.values()]

    def to_json(self) -> dict:
        return {
            "scope": self.scope,
            "salt": base64.b64encode(self.salt).decode(),
            "active_key_id": self.active_key_id,
            "keys": [
                {
                    "key_id": e.key_id,
                    "wrapped": base64.b64encode(e.wrapped).decode() if e.wrapped else None,
                    "created": e.created,
                    "retired": e.retired,
                }
                for e in self.keys.values()
            ],
        }

    @classmethod
    def from_json(cls, data: dict, passphrase: str | bytes) -> "KeyRing":
        salt = base64.b64decode(data["salt"])
        ring = cls(derive_master_key(passphrase, salt), salt, data["scope"])
        for k in data["keys"]:
            wrapped = base64.b64decode(k["wrapped"]) if k["wrapped"] else None
            ring.keys[k["key_id"]] = KeyEntry(k["key_id"], wrapped, k["created"], k["retired"])
        ring.active_key_id = data["active_key_id"]
        return ring


@dataclass(frozen=True)
class SealedRecord:
    record_id: str
    key_id: str
    nonce: bytes
    ciphertext: bytes
    aad: bytes

    def to_manifest(self) -> dict:
        return {
            "key_id": self.key_id,
            "aad": base64.b64encode(self.aad).decode(),
        }


def associated_data(record_id: str, schema_version: int) -> bytes:
    return f"{record_id}|v{schema_version}".encode()


def seal(plaintext: bytes, keyring: KeyRing, record_id: str, schema_version: int = 1) -> SealedRecord:
    key_id = keyring.active_key_id
    if key_id is None:
        raise VaultError(f"keyring {keyring.scope} has no active key")
    nonce = keyring.fresh_nonce(key_id)
    aad = associated_data(record_id, schema_version)
    ct = AESGCM(keyring.data_key(key_id)).encrypt(nonce, plaintext, aad)
    return SealedRecord(record_id, key_id, nonce, ct, aad)


def unseal(record: SealedRecord, keyring: KeyRing) -> bytes:
    if not record.aad.startswith(record.record_id.encode() + b"|"):
        raise AuthenticationError(f"associated data does not belong to {record.record_id}")
    key = keyring.data_key(record.key_id)
    try:
        return AESGCM(key).decrypt(record.nonce, record.ciphertext, record.aad)
    except InvalidTag:
        raise AuthenticationError(f"record {record.record_id} failed authentication") from None


def _schema_version(aad: bytes) -> int:
    return int(aad.rsplit(b"|v", 1)[1])


class SealedStore:
    """Sealed records, optionally mirrored to disk as ``<root>/<partition>/<id>.bin``
    (nonce + ciphertext) with a JSON manifest."""

    MANIFEST = "manifest.json"

    def __init__(self, root: Path | str | None = None):
        self.root = Path(root) if root is not None else None
        self.records: dict[str, SealedRecord] = {}
        self.partitions: dict[str, str] = {}
        self.rotation: dict | None = None
        self.lock = threading.Lock()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            if (self.root / self.MANIFEST).exists():
                self._load()

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self.records

    def ids(self) -> list[str]:
        return sorted(self.records)

    def put(self, record: SealedRecord, partition: str = "default", flush: bool = True) -> None:
        with self.lock:
            self.records[record.record_id] = record
            self.partitions[record.record_id] = partition
            if self.root is not None:
                d = self.root / partition
                d.mkdir(exist_ok=True)
                (d / f"{record.record_id}.bin").write_bytes(record.nonce + record.ciphertext)
                if flush:
                    self.flush()

    def get(self, record_id: str) -> SealedRecord:
        try:
            return self.records[record_id]
        except KeyError:
            raise VaultError(f"no sealed record {record_id}") from None

    def delete(self, record_id: str) -> None:
        with self.lock:
            self.records.pop(record_id, None)
            partition = self.partitions.pop(record_id, None)
            if self.root is not None and partition is not None:
                (self.root / partition / f"{record_id}.bin").unlink(missing_ok=True)

    def flush(self) -> None:
        if self.root is None:
            return
        manifest = {
            "records": {
                rid: {**rec.to_manifest(), "partition": self.partitions[rid]}
                for rid, rec in sorted(self.records.items())
            },
            "rotation": self.rotation,
        }
        tmp = self.root / (self.MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        tmp.replace(self.root / self.MANIFEST)

    def _load(self) -> None:
        manifest = json.loads((self.root / self.MANIFEST).read_text())
        self.rotation = manifest.get("rotation")
        for rid, meta in manifest["records"].items():
            blob = (self.root / meta["partition"] / f"{rid}.bin").read_bytes()
            self.records[rid] = SealedRecord(
                rid, meta["key_id"], blob[:NONCE_BYTES], blob[NONCE_BYTES:],
                base64.b64decode(meta["aad"]),
            )
            self.partitions[rid] = meta["partition"]


@dataclass
class RotationReport:
    new_key_id: str
    rewrapped: int
    remaining: list[str] = field(default_factory=list)
    destroyed_keys: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.remaining


class RotationInterrupted(VaultError):
    pass


def rotate_keys(
    keyring: KeyRing,
    store: SealedStore,
    now: float = 0.0,
    batch_size: int = 100,
    interrupt_after: int | None = None,
) -> RotationReport:
    """Re-encrypt every record under a new active key, then destroy the old keys.

    Progress lives in ``store.rotation`` so an interrupted rotation resumes
    with the same target key and never rewraps a record twice.
    ``interrupt_after`` simulates a crash after that many rewraps.
    """
    if store.rotation and store.rotation.get("scope") == keyring.scope:
        target = store.rotation["target"]
    else:
        target = keyring.new_key(now)
        store.rotation = {"scope": keyring.scope, "target": target}
        store.flush()

    pending = [rid for rid in store.ids() if store.records[rid].key_id != target]
    done = 0
    for start in range(0, len(pending), batch_size):
        batch = pending[start:start + batch_size]
        with store.lock:
            for rid in batch:
                if interrupt_after is not None and done >= interrupt_after:
                    break
                old = store.records[rid]
                plain = unseal(old, keyring)
                new = seal(plain, keyring, rid, _schema_version(old.aad))
                assert new.key_id == target
                store.records[rid] = new
                if store.root is not None:
                    part = store.partitions[rid]
                    (store.root / part / f"{rid}.bin").write_bytes(new.nonce + new.ciphertext)
                done += 1
        store.flush()
        if interrupt_after is not None and done >= interrupt_after:
            break

    remaining = [rid for rid in store.ids() if store.records[rid].key_id != target]
    report = RotationReport(target, done, remaining)
    if not remaining:
        for key_id in keyring.live_keys():
            if key_id != target:
                keyring.retire(key_id, now)
                keyring.destroy(key_id)
                report.destroyed_keys.append(key_id)
        store.rotation = None
        store.flush()
    return report


@dataclass
class RevocationReport:
    scope: str
    destroyed_keys: list[str]
    wiped_records: int
    noop: bool = False


class Vault:
    """Keyrings and sealed stores per scope, wired to the audit ledger."""

    SCOPES = ("local", "cloud_sync", "actor_cache")
    REVOCABLE = ("cloud_sync", "actor_cache")

    def __init__(self, passphrase: str | bytes, ledger=None, root: Path | str | None = None,
                 salt: bytes | None = None):
        self.ledger = ledger
        root = Path(root) if root is not None else None
        self.keyrings = {s: KeyRing.create(passphrase, s, salt=salt) for s in self.SCOPES}
        self.stores = {s: SealedStore(root / s if root else None) for s in self.SCOPES}
        self.revoked: set[str] = set()

    def put(self, scope: str, record_id: str, plaintext: bytes, partition: str = "default",
            schema_version: int = 1, flush: bool = True) -> SealedRecord:
        if scope in self.revoked:
            raise VaultError(f"scope {scope} has been revoked")
        rec = seal(plaintext, self.keyrings[scope], record_id, schema_version)
        self.stores[scope].put(rec, partition, flush=flush)
        return rec

    def get(self, scope: str, record_id: str) -> bytes:
        return unseal(self.stores[scope].get(record_id), self.keyrings[scope])

    def rotate(self, scope: str, now: float = 0.0, **kw) -> RotationReport:
        report = rotate_keys(self.keyrings[scope], self.stores[scope], now, **kw)
        if self.ledger is not None:
            self.ledger.append("system", "rotation", {
                "scope": scope, "key_id": report.new_key_id, "rewrapped": report.rewrapped,
                "remaining": len(report.remaining), "destroyed_key_ids": report.destroyed_keys,
            }, now)
        return report

    def revoke_access(self, scope: str, wipe: bool = False, now: float = 0.0) -> RevocationReport:
        if scope not in self.REVOCABLE:
            raise VaultError(f"unknown or non-revocable scope {scope!r}")
        if scope in self.revoked:
            log.warning("scope %s already revoked; nothing to do", scope)
            return RevocationReport(scope, [], 0, noop=True)
        ring, store = self.keyrings[scope], self.stores[scope]
        destroyed = ring.live_keys()
        for key_id in destroyed:
            ring.destroy(key_id)
        wiped = 0
        if wipe:
            for rid in store.ids():
                store.delete(rid)
                wiped += 1
            store.flush()
        self.revoked.add(scope)
        if self.ledger is not None:
            self.ledger.append("system", "wipe" if wipe else "revoke", {
                "scope": scope, "destroyed_key_ids": destroyed, "wiped": wiped,
            }, now)
        return RevocationReport(scope, destroyed, wiped)

    def unreadable(self, scope: str) -> list[str]:
        """Record ids in ``scope`` that no longer decrypt."""
        out = []
        for rid in self.stores[scope].ids():
            try:
                self.get(scope, rid)
            except VaultError:
                out.append(rid)
        return out

    def records(self, scope: str) -> Iterable[str]:
        return self.stores[scope].ids()
