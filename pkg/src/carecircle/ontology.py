"""Canonical ontology: a small line-oriented schema language, event validation,
unit normalization and versioned migrations.

File grammar::

    # comment
    version 1
    entity VitalSign
      field heart_rate: quantity unit=bpm required
      relation subject -> Person
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Callable, Iterable, Mapping, Sequence

from ._time import to_utc

KINDS = ("quantity", "code", "text", "timestamp", "boolean")

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_VERSION_RE = re.compile(r"^version\s+(\S+)$")
_ENTITY_RE = re.compile(rf"^entity\s+({_IDENT})$")
_FIELD_RE = re.compile(rf"^field\s+({_IDENT})\s*:\s*(\S+)((?:\s+\S+)*)$")
_RELATION_RE = re.compile(rf"^relation\s+({_IDENT})\s*->\s*({_IDENT})$")


class OntologyError(ValueError):
    """Malformed ontology text. ``line`` is 1-based, or None for whole-file problems."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(ValueError):
    """A raw record does not conform to its entity.

    ``errors`` is a list of (field name, problem) pairs where problem is one of
    ``missing``, ``unknown``, ``kind``, ``unit``.
    """

    def __init__(self, entity: str, errors: Sequence[tuple[str, str]]):
        self.entity = entity
        self.errors = list(errors)
        detail = ", ".join(f"{name} ({problem})" for name, problem in self.errors)
        super().__init__(f"{entity}: {detail}")

    @property
    def fields(self) -> list[str]:
        return [name for name, _ in self.errors]


class MigrationError(ValueError):
    pass


@dataclass(frozen=True)
class FieldDef:
    name: str
    kind: str
    unit: str | None = None
    required: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OntologyError(f"unknown kind {self.kind!r} for field {self.name!r}")
        if self.kind == "quantity" and not self.unit:
            raise OntologyError(f"quantity field {self.name!r} needs a unit")
        if self.kind != "quantity" and self.unit:
            raise OntologyError(f"non-quantity field {self.name!r} cannot carry a unit")


@dataclass(frozen=True)
class EntityDef:
    name: str
    fields: tuple[FieldDef, ...]
    relations: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.fields:
            raise OntologyError(f"entity {self.name!r} declares no fields")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise OntologyError(f"duplicate field in entity {self.name!r}")

    def field(self, name: str) -> FieldDef:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(f"{self.name}.{name}")

    def has_field(self, name: str) -> bool:
        return any(f.name == name for f in self.fields)


@dataclass(frozen=True)
class OntologySchema:
    version: int
    entities: tuple[EntityDef, ...]

    def __post_init__(self):
        if self.version < 1:
            raise OntologyError("version must be >= 1")
        names = [e.name for e in self.entities]
        if len(set(names)) != len(names):
            raise OntologyError("duplicate entity")
        for e in self.entities:
            for rel, target in e.relations:
                if target not in names:
                    raise OntologyError(f"unknown relation target {target!r} in {e.name}.{rel}")

    def entity(self, name: str) -> EntityDef:
        for e in self.entities:
            if e.name == name:
                return e
        raise KeyError(name)

    def has_entity(self, name: str) -> bool:
        return any(e.name == name for e in self.entities)

    def paths(self) -> list[str]:
        """Every ``Entity.field`` path, in declaration order."""
        return [f"{e.name}.{f.name}" for e in self.entities for f in e.fields]

    def field(self, path: str) -> FieldDef:
        entity, _, name = path.partition(".")
        return self.entity(entity).field(name)

    def has_path(self, path: str) -> bool:
        entity, _, name = path.partition(".")
        return self.has_entity(entity) and self.entity(entity).has_field(name)


def parse_ontology(text: str) -> OntologySchema:
    if not text or not text.strip():
        raise OntologyError("empty ontology text")
    version: int | None = None
    # name -> (line, fields, relations with line numbers)
    entities: dict[str, tuple[int, list[FieldDef], list[tuple[str, str, int]]]] = {}
    current: str | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        indented = line[0] in " \t"
        body = line.strip()

        if not indented:
            if m := _VERSION_RE.match(body):
                if version is not None:
                    raise OntologyError("duplicate version header", lineno)
                try:
                    version = int(m.group(1))
                except ValueError:
                    raise OntologyError(f"bad version {m.group(1)!r}", lineno) from None
                if version < 1:
                    raise OntologyError("version must be >= 1", lineno)
                continue
            if m := _ENTITY_RE.match(body):
                if version is None:
                    raise OntologyError("missing version header", lineno)
                name = m.group(1)
                if name in entities:
                    raise OntologyError(f"duplicate entity {name!r}", lineno)
                entities[name] = (lineno, [], [])
                current = name
                continue
            raise OntologyError(f"syntax error: {body!r}", lineno)

        if current is None:
            raise OntologyError("indented line outside an entity", lineno)
        _, fields, relations = entities[current]
        if m := _FIELD_RE.match(body):
            fname, kind, rest = m.group(1), m.group(2), m.group(3).split()
            unit, required = None, False
            for token in rest:
                if token == "required":
                    required = True
                elif token.startswith("unit=") and len(token) > 5:
                    unit = token[5:]
                else:
                    raise OntologyError(f"unexpected token {token!r}", lineno)
            if any(f.name == fname for f in fields):
                raise OntologyError(f"duplicate field {current}.{fname}", lineno)
            try:
                fields.append(FieldDef(fname, kind, unit, required))
            except OntologyError as exc:
                raise OntologyError(str(exc), lineno) from None
            continue
        if m := _RELATION_RE.match(body):
            relations.append((m.group(1), m.group(2), lineno))
            continue
        raise OntologyError(f"syntax error: {body!r}", lineno)

    if version is None:
        raise OntologyError("missing version header")
    built = []
    for name, (lineno, fields, relations) in entities.items():
        for rel, target, rel_line in relations:
            if target not in entities:
                raise OntologyError(f"unknown relation target {target!r}", rel_line)
        if not fields:
            raise OntologyError(f"entity {name!r} declares no fields", lineno)
        built.append(EntityDef(name, tuple(fields), tuple((r, t) for r, t, _ in relations)))
    return OntologySchema(version, tuple(built))


def serialize_ontology(schema: OntologySchema) -> str:
    lines = [f"version {schema.version}"]
    for e in schema.entities:
        lines.append("")
        lines.append(f"entity {e.name}")
        for f in e.fields:
            parts = [f"  field {f.name}: {f.kind}"]
            if f.unit:
                parts.append(f"unit={f.unit}")
            if f.required:
                parts.append("required")
            lines.append(" ".join(parts))
        for rel, target in e.relations:
            lines.append(f"  relation {rel} -> {target}")
    return "\n".join(lines) + "\n"


def default_ontology_text() -> str:
    return resources.files("carecircle.data").joinpath("ontology.txt").read_text("utf-8")


def load_default_ontology() -> OntologySchema:
    return parse_ontology(default_ontology_text())


# ---------------------------------------------------------------------------
# Units
# ---------------------------------------------------------------------------

_CONVERTERS: dict[tuple[str, str], Callable[[float], float]] = {}


def register_converter(unit: str, canonical: str, fn: Callable[[float], float]) -> None:
    _CONVERTERS[(unit, canonical)] = fn


def _scale(factor: float) -> Callable[[float], float]:
    return lambda x: x * factor


for _unit, _canon, _fn in [
    ("count/min", "bpm", _scale(1.0)),
    ("beats/min", "bpm", _scale(1.0)),
    ("steps/min", "steps/hour", _scale(60.0)),
    ("steps/day", "steps/hour", _scale(1 / 24)),
    ("hours", "minutes", _scale(60.0)),
    ("h", "minutes", _scale(60.0)),
    ("s", "minutes", _scale(1 / 60)),
    ("seconds", "minutes", _scale(1 / 60)),
    ("km", "m", _scale(1000.0)),
    ("mi", "m", _scale(1609.344)),
    ("degF", "degC", lambda x: (x - 32.0) * 5.0 / 9.0),
    ("lb", "kg", _scale(0.45359237)),
    ("kPa", "mmHg", _scale(7.500617)),
    ("fraction", "%", _scale(100.0)),
    ("kJ", "kcal", _scale(1 / 4.184)),
    ("s_ibi", "ms", _scale(1000.0)),
    ("g", "mg", _scale(1000.0)),
]:
    register_converter(_unit, _canon, _fn)


class UnitError(ValueError):
    pass


def convert_unit(value: float, unit: str, canonical: str) -> float:
    if unit == canonical:
        return float(value)
    try:
        fn = _CONVERTERS[(unit, canonical)]
    except KeyError:
        raise UnitError(f"cannot convert {unit!r} to {canonical!r}") from None
    return float(fn(value))


def can_convert(unit: str, canonical: str) -> bool:
    return unit == canonical or (unit, canonical) in _CONVERTERS


# ---------------------------------------------------------------------------
# Typed events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Quantity:
    value: float
    unit: str


@dataclass(frozen=True)
class TypedEvent:
    entity: str
    version: int
    fields: Mapping[str, Any]

    def to_json(self) -> dict:
        out = {}
        for name, value in self.fields.items():
            if isinstance(value, Quantity):
                out[name] = {"value": value.value, "unit": value.unit}
            else:
                out[name] = value
        return {"entity": self.entity, "version": self.version, "fields": out}

    @classmethod
    def from_json(cls, data: Mapping) -> "TypedEvent":
        fields = {}
        for name, value in data["fields"].items():
            if isinstance(value, Mapping) and set(value) == {"value", "unit"}:
                fields[name] = Quantity(float(value["value"]), value["unit"])
            else:
                fields[name] = value
        return cls(data["entity"], int(data["version"]), fields)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(fdef: FieldDef, value: Any) -> tuple[Any, str | None]:
    """Return (typed value, problem or None)."""
    if fdef.kind == "quantity":
        unit = fdef.unit
        if isinstance(value, Quantity):
            value, unit = value.value, value.unit
        elif isinstance(value, Mapping):
            if "value" not in value:
                return None, "kind"
            value, unit = value["value"], value.get("unit", fdef.unit)
        if not _is_number(value) or not math.isfinite(value):
            return None, "kind"
        try:
            return Quantity(convert_unit(value, unit, fdef.unit), fdef.unit), None
        except UnitError:
            return None, "unit"
    if fdef.kind in ("code", "text"):
        if not isinstance(value, str) or (fdef.kind == "code" and not value):
            return None, "kind"
        return value, None
    if fdef.kind == "timestamp":
        if _is_number(value) and math.isfinite(value):
            return float(value), None
        if isinstance(value, str):
            try:
                return to_utc(value), None
            except ValueError:
                return None, "kind"
        return None, "kind"
    if not isinstance(value, bool):
        return None, "kind"
    return value, None


def validate_event(schema: OntologySchema, raw: Mapping[str, Any], entity: str) -> TypedEvent:
    """Type a raw key/value record against ``entity``.

    Unknown fields are rejected, never dropped. ``None`` counts as absent.
    """
    edef = schema.entity(entity)
    errors: list[tuple[str, str]] = []
    typed: dict[str, Any] = {}
    for name in raw:
        if not edef.has_field(name):
            errors.append((name, "unknown"))
    for fdef in edef.fields:
        value = raw.get(fdef.name)
        if value is None:
            if fdef.required:
                errors.append((fdef.name, "missing"))
            continue
        coerced, problem = _coerce(fdef, value)
        if problem:
            errors.append((fdef.name, problem))
        else:
            typed[fdef.name] = coerced
    if errors:
        raise ValidationError(entity, errors)
    return TypedEvent(entity, schema.version, typed)


# ---------------------------------------------------------------------------
# Migrations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AddField:
    entity: str
    field: FieldDef
    default: Any = None


@dataclass(frozen=True)
class RenameField:
    entity: str
    old: str
    new: str


@dataclass(frozen=True)
class DropField:
    entity: str
    name: str


@dataclass(frozen=True)
class RetypeField:
    entity: str
    name: str
    kind: str
    converter: str
    unit: str | None = None


MigrationAction = AddField | RenameField | DropField | RetypeField


def _quantity_to_text(v: Any) -> str:
    return f"{v.value:g} {v.unit}"


def _text_to_number(v: Any) -> float:
    if isinstance(v, Quantity):
        return v.value
    return float(str(v).split()[0])


RETYPE_CONVERTERS: dict[str, Callable[[Any], Any]] = {
    "identity": lambda v: v,
    "quantity_to_text": _quantity_to_text,
    "text_to_number": _text_to_number,
    "code_to_text": str,
    "text_to_code": lambda v: str(v).strip().lower().replace(" ", "_"),
    "bool_to_code": lambda v: "yes" if v else "no",
}


@dataclass(frozen=True)
class MigrationStep:
    from_version: int
    to_version: int
    actions: tuple[MigrationAction, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.to_version != self.from_version + 1:
            raise MigrationError(
                f"step {self.from_version}->{self.to_version} must advance by one version"
            )


def chain(steps: Iterable[MigrationStep], source: int, target: int) -> list[MigrationStep]:
    """The contiguous run of steps taking ``source`` to ``target``."""
    if target < source:
        raise MigrationError("downgrades are not supported")
    by_from = {s.from_version: s for s in steps}
    out = []
    for v in range(source, target):
        if v not in by_from:
            raise MigrationError(f"missing migration step {v}->{v + 1}")
        out.append(by_from[v])
    return out


def migrate_schema(schema: OntologySchema, step: MigrationStep) -> OntologySchema:
    if schema.version != step.from_version:
        raise MigrationError(f"schema is v{schema.version}, step starts at v{step.from_version}")
    entities = {e.name: e for e in schema.entities}
    for action in step.actions:
        edef = entities.get(action.entity)
        if edef is None:
            raise MigrationError(f"unknown entity {action.entity!r}")
        fields = list(edef.fields)
        names = [f.name for f in fields]
        if isinstance(action, AddField):
            if action.field.name in names:
                raise MigrationError(f"{action.entity}.{action.field.name} already exists")
            fields.append(action.field)
        else:
            target = action.old if isinstance(action, RenameField) else action.name
            if target not in names:
                raise MigrationError(f"{action.entity}.{target} does not exist")
            i = names.index(target)
            if isinstance(action, RenameField):
                fields[i] = replace(fields[i], name=action.new)
            elif isinstance(action, DropField):
                del fields[i]
            else:
                fields[i] = FieldDef(target, action.kind, action.unit, fields[i].required)
        entities[action.entity] = EntityDef(edef.name, tuple(fields), edef.relations)
    return OntologySchema(step.to_version, tuple(entities.values()))


def migrate_entity(
    steps: Sequence[MigrationStep], record: TypedEvent, target: int
) -> TypedEvent:
    """Carry ``record`` forward to schema version ``target``."""
    fields = dict(record.fields)
    for step in chain(steps, record.version, target):
        for action in step.actions:
            if action.entity != record.entity:
                continue
            if isinstance(action, AddField):
                if action.field.name not in fields and action.default is not None:
                    default = action.default
                    if action.field.kind == "quantity" and not isinstance(default, Quantity):
                        default = Quantity(float(default), action.field.unit)
                    fields[action.field.name] = default
            elif isinstance(action, RenameField):
                if action.old in fields:
                    fields[action.new] = fields.pop(action.old)
            elif isinstance(action, DropField):
                fields.pop(action.name, None)
            elif action.name in fields:
                try:
                    fn = RETYPE_CONVERTERS[action.converter]
                except KeyError:
                    raise MigrationError(f"unknown converter {action.converter!r}") from None
                try:
                    value = fn(fields[action.name])
                except (TypeError, ValueError, IndexError, AttributeError) as exc:
                    raise MigrationError(
                        f"converter {action.converter!r} failed on "
                        f"{record.entity}.{action.name}: {exc}"
                    ) from exc
                if action.kind == "quantity" and not isinstance(value, Quantity):
                    value = Quantity(float(value), action.unit)
                fields[action.name] = value
    return TypedEvent(record.entity, target, fields)


def record_to_raw(record: TypedEvent) -> dict[str, Any]:
    """Inverse of validation, for re-validating migrated records."""
    return {
        k: ({"value": v.value, "unit": v.unit} if isinstance(v, Quantity) else v)
        for k, v in record.fields.items()
    }
