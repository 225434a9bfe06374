"""Care circles, roles and time-bounded per-field consent.

Every read path goes through :func:`CareGraph.resolve_permissions`; the result
is a :class:`PermissionSet` mapping ``Entity.field`` paths to an access level.
"""
from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from importlib import resources
from typing import Any, Iterable, Mapping, Protocol

from .ontology import OntologySchema


class Role(str, Enum):
    SUBJECT = "subject"
    CARE_PRIMARY = "care_primary"
    FAMILY_MONITOR = "family_monitor"
    NUDGE_ONLY = "nudge_only"
    CLINICIAN = "clinician"


class AccessLevel(IntEnum):
    NONE = 0
    STATUS_FLAG = 1
    AGGREGATE = 2
    FULL = 3

    @classmethod
    def parse(cls, name: str | "AccessLevel") -> "AccessLevel":
        if isinstance(name, AccessLevel):
            return name
        return cls[name.upper()]

    @property
    def label(self) -> str:
        return self.name.lower()


class GraphError(ValueError):
    pass


class MembershipError(GraphError):
    pass


class ConsentIntervalError(GraphError):
    pass


class ConsentNotFound(GraphError, KeyError):
    pass


class AlreadyRevoked(GraphError):
    pass


class AuditSink(Protocol):
    def append(self, partition: str, kind: str, payload: Mapping[str, Any], ts: float) -> Any: ...


@dataclass(frozen=True)
class CareCircle:
    id: str
    subject: str
    members: tuple[tuple[str, Role], ...]

    def __post_init__(self):
        subjects = [a for a, r in self.members if r == Role.SUBJECT]
        if subjects != [self.subject]:
            raise GraphError(f"circle {self.id}: subject must be exactly one member with role subject")
        if len(self.members) < 2:
            raise GraphError(f"circle {self.id}: needs at least two members")
        ids = [a for a, _ in self.members]
        if len(set(ids)) != len(ids):
            raise GraphError(f"circle {self.id}: duplicate member")

    def role_of(self, actor: str) -> Role | None:
        for a, r in self.members:
            if a == actor:
                return r
        return None

    def actors(self) -> list[str]:
        return [a for a, _ in self.members]


@dataclass
class ActorProfile:
    id: str
    display_name: str = ""
    roles: dict[str, Role] = field(default_factory=dict)


@dataclass(frozen=True)
class ConsentRecord:
    grantor: str
    grantee: str
    fields: frozenset[str]
    access_level: AccessLevel
    valid_from: float
    valid_until: float
    revoked_at: float | None = None
    purpose: str = ""
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "fields", frozenset(self.fields))
        object.__setattr__(self, "access_level", AccessLevel.parse(self.access_level))
        if not self.valid_from < self.valid_until:
            raise ConsentIntervalError(
                f"valid_from {self.valid_from} must precede valid_until {self.valid_until}"
            )
        if self.revoked_at is not None and self.revoked_at < self.valid_from:
            raise ConsentIntervalError("revoked_at precedes valid_from")
        if not self.fields and self.access_level != AccessLevel.NONE:
            raise GraphError("a consent above level none must name at least one field")
        if not self.id:
            object.__setattr__(self, "id", "cr-" + self.content_hash()[:16])

    def content_hash(self) -> str:
        body = json.dumps(
            [self.grantor, self.grantee, sorted(self.fields), self.access_level.label,
             self.valid_from, self.valid_until, self.purpose],
            separators=(",", ":"),
        )
        return hashlib.sha256(body.encode()).hexdigest()

    def active_at(self, t: float) -> bool:
        if not self.valid_from <= t < self.valid_until:
            return False
        return self.revoked_at is None or t < self.revoked_at

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "grantor": self.grantor,
            "grantee": self.grantee,
            "fields": sorted(self.fields),
            "access_level": self.access_level.label,
            "valid_from": self.valid_from,
            "valid_until": self.valid_until,
            "revoked_at": self.revoked_at,
            "purpose": self.purpose,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "ConsentRecord":
        return cls(
            grantor=data["grantor"],
            grantee=data["grantee"],
            fields=frozenset(data["fields"]),
            access_level=AccessLevel.parse(data["access_level"]),
            valid_from=float(data["valid_from"]),
            valid_until=float(data["valid_until"]),
            revoked_at=None if data.get("revoked_at") is None else float(data["revoked_at"]),
            purpose=data.get("purpose", ""),
            id=data.get("id", ""),
        )


@dataclass(frozen=True)
class PermissionSet:
    grantee: str
    subject: str
    levels: Mapping[str, AccessLevel]
    evaluated_at: float

    @property
    def fields(self) -> frozenset[str]:
        return frozenset(p for p, lvl in self.levels.items() if lvl > AccessLevel.NONE)

    def level(self, path: str) -> AccessLevel:
        return self.levels.get(path, AccessLevel.NONE)

    def __len__(self) -> int:
        return len(self.fields)

    def restrict(self, paths: Iterable[str]) -> "PermissionSet":
        keep = set(paths)
        return replace(self, levels={p: l for p, l in self.levels.items() if p in keep})


# ---------------------------------------------------------------------------
# Role templates
# ---------------------------------------------------------------------------

RoleTemplates = dict[Role, dict[str, AccessLevel]]


def load_role_templates(schema: OntologySchema | None = None, text: str | None = None) -> RoleTemplates:
    """Read ``roles.json``. The subject's ``"*"`` expands to every schema path."""
    if text is None:
        text = resources.files("carecircle.data").joinpath("roles.json").read_text("utf-8")
    data = json.loads(text)
    out: RoleTemplates = {}
    for name, spec in data["roles"].items():
        perms = spec["permissions"]
        if perms == "*":
            out[Role(name)] = (
                {p: AccessLevel.FULL for p in schema.paths()} if schema is not None else {}
            )
        else:
            out[Role(name)] = {p: AccessLevel.parse(lvl) for p, lvl in perms.items()}
    missing = set(Role) - set(out)
    if missing:
        raise GraphError(f"roles file lacks templates for {sorted(r.value for r in missing)}")
    if schema is not None:
        for role, perms in out.items():
            for p in perms:
                if not schema.has_path(p):
                    raise GraphError(f"role {role.value}: unknown field path {p}")
    return out


def templates_to_json(templates: RoleTemplates) -> dict:
    return {
        role.value: {p: lvl.label for p, lvl in sorted(perms.items())}
        for role, perms in sorted(templates.items(), key=lambda kv: kv[0].value)
    }


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


class CareGraph:
    """Actors, circles and consents. Mutations are serialized through one lock;
    readers work off an immutable snapshot of the consent table."""

    def __init__(self, schema: OntologySchema, audit: AuditSink | None = None):
        self.schema = schema
        self.audit = audit
        self.actors: dict[str, ActorProfile] = {}
        self.circles: dict[str, CareCircle] = {}
        self._consents: dict[str, ConsentRecord] = {}
        self._view: tuple[ConsentRecord, ...] = ()
        self._lock = threading.Lock()

    # -- structure -----------------------------------------------------------

    def add_actor(self, actor_id: str, display_name: str = "") -> ActorProfile:
        with self._lock:
            if actor_id in self.actors:
                raise GraphError(f"duplicate actor {actor_id}")
            profile = ActorProfile(actor_id, display_name)
            self.actors[actor_id] = profile
            return profile

    def add_circle(self, circle: CareCircle) -> None:
        with self._lock:
            if circle.id in self.circles:
                raise GraphError(f"duplicate circle {circle.id}")
            for actor, _ in circle.members:
                if actor not in self.actors:
                    raise GraphError(f"circle {circle.id} references unknown actor {actor}")
            self.circles[circle.id] = circle
            for actor, role in circle.members:
                self.actors[actor].roles[circle.id] = role

    def actor_profile(self, actor_id: str) -> ActorProfile:
        try:
            return self.actors[actor_id]
        except KeyError:
            raise GraphError(f"unknown actor {actor_id}") from None

    def shared_circles(self, a: str, b: str) -> list[CareCircle]:
        return sorted(
            (c for c in self.circles.values() if c.role_of(a) is not None and c.role_of(b) is not None),
            key=lambda c: c.id,
        )

    def circle_of_subject(self, subject: str) -> CareCircle | None:
        for c in sorted(self.circles.values(), key=lambda c: c.id):
            if c.subject == subject:
                return c
        return None

    def role_of(self, actor: str, subject: str) -> Role | None:
        if actor == subject:
            return Role.SUBJECT
        for c in self.shared_circles(actor, subject):
            if c.subject == subject:
                return c.role_of(actor)
        return None

    def consents(self) -> tuple[ConsentRecord, ...]:
        return self._view

    def consent(self, consent_id: str) -> ConsentRecord:
        try:
            return self._consents[consent_id]
        except KeyError:
            raise ConsentNotFound(consent_id) from None

    # -- mutation --------------------------------------------------------------

    def _audit(self, circle: str, kind: str, payload: dict, ts: float) -> None:
        if self.audit is not None:
            self.audit.append(circle, kind, payload, ts)

    def _payload(self, c: ConsentRecord) -> dict:
        return {
            "consent_id": c.id,
            "grantor_id": c.grantor,
            "grantee_id": c.grantee,
            "access_level": c.access_level.label,
            "fields_hash": hashlib.sha256("|".join(sorted(c.fields)).encode()).hexdigest(),
        }

    def grant(self, consent: ConsentRecord) -> str:
        circles = [c for c in self.shared_circles(consent.grantor, consent.grantee)
                   if c.subject == consent.grantor]
        if not circles:
            raise MembershipError(
                f"{consent.grantee} is not in a circle whose subject is {consent.grantor}"
            )
        for p in consent.fields:
            if not self.schema.has_path(p):
                raise GraphError(f"unknown field path {p}")
        if consent.revoked_at is not None:
            raise GraphError("new consents cannot arrive already revoked")
        with self._lock:
            if consent.id in self._consents:
                raise GraphError(f"duplicate consent id {consent.id}")
            self._consents[consent.id] = consent
            self._view = self._view + (consent,)
        self._audit(circles[0].id, "grant", self._payload(consent), consent.valid_from)
        return consent.id

    def revoke(self, consent_id: str, at: float) -> ConsentRecord:
        with self._lock:
            current = self._consents.get(consent_id)
            if current is None:
                raise ConsentNotFound(consent_id)
            if current.revoked_at is not None:
                raise AlreadyRevoked(consent_id)
            updated = replace(current, revoked_at=max(at, current.valid_from))
            self._consents[consent_id] = updated
            self._view = tuple(updated if c.id == consent_id else c for c in self._view)
        circles = self.shared_circles(updated.grantor, updated.grantee)
        partition = circles[0].id if circles else "system"
        self._audit(partition, "revoke", self._payload(updated), at)
        return updated

    # -- resolution --------------------------------------------------------------

    def resolve_permissions(self, actor: str, subject: str, now: float) -> PermissionSet:
        if actor == subject:
            return PermissionSet(actor, subject, {p: AccessLevel.FULL for p in self.schema.paths()}, now)
        if not any(c.subject == subject for c in self.shared_circles(actor, subject)):
            return PermissionSet(actor, subject, {}, now)
        levels: dict[str, AccessLevel] = {}
        for c in self._view:
            if c.grantor != subject or c.grantee != actor or not c.active_at(now):
                continue
            if c.access_level == AccessLevel.NONE:
                continue
            for p in c.fields:
                if c.access_level > levels.get(p, AccessLevel.NONE):
                    levels[p] = c.access_level
        return PermissionSet(actor, subject, levels, now)

    def apply_acls(
        self, actor: str, subject: str, requested: Iterable[str] | None, now: float
    ) -> PermissionSet:
        """The requested scope intersected with what ``actor`` may see; never wider."""
        perm = self.resolve_permissions(actor, subject, now)
        if requested is None:
            return perm
        return perm.restrict(requested)


def grant_template(
    graph: CareGraph,
    subject: str,
    grantee: str,
    template: Mapping[str, AccessLevel],
    valid_from: float,
    valid_until: float,
    purpose: str = "role template",
) -> list[str]:
    """Issue one consent per distinct access level in ``template``."""
    by_level: dict[AccessLevel, set[str]] = {}
    for path, lvl in template.items():
        by_level.setdefault(AccessLevel.parse(lvl), set()).add(path)
    ids = []
    for lvl in sorted(by_level):
        if lvl == AccessLevel.NONE:
            continue
        ids.append(graph.grant(ConsentRecord(
            grantor=subject, grantee=grantee, fields=frozenset(by_level[lvl]),
            access_level=lvl, valid_from=valid_from, valid_until=valid_until, purpose=purpose,
        )))
    return ids


def filter_fields(features, perm: PermissionSet):
    """Degrade every feature to the level ``perm`` grants; drop the rest.

    ``features`` is a :class:`carecircle.profile.FeatureSet`.
    """
    kept = {}
    for path, feat in features.features.items():
        lvl = perm.level(path)
        if lvl > AccessLevel.NONE:
            kept[path] = feat.at_level(lvl)
    return replace(features, features=kept, filtered_for=perm.grantee)
