"""Role briefing templates: loading, filling and task extraction."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

from .._time import format_iso
from ..caregraph import AccessLevel, Role
from ..ontology import OntologySchema
from ..profile import Feature, TimeWindow
from ..render import empty_line, feature_line
from .types import Task

_PLACEHOLDER_RE = re.compile(r"^\{([A-Z][A-Za-z]*)\.(\*|[a-z_][a-z0-9_]*)\}$")
TASK_BULLET = "- [ ] "
ACTION_FLAGS = ("attention", "urgent")
RENDERED_KINDS = ("quantity", "code")


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class Section:
    heading: str
    body: tuple[str, ...]
    actionable: bool = False


@dataclass(frozen=True)
class Template:
    role: Role
    persona: str
    title: str
    sections: tuple[Section, ...]
    required: tuple[str, ...] = ()
    task_prefix: str = "Check"

    def groups(self) -> list[str]:
        return [line for s in self.sections for line in s.body if _PLACEHOLDER_RE.match(line)]


@dataclass
class TemplateSet:
    templates: dict[Role, Template]
    labels: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, role: Role) -> Template:
        try:
            return self.templates[role]
        except KeyError:
            raise TemplateError(f"no template for role {role.value}") from None

    def persona(self, role: Role) -> str:
        return self[role].persona

    def to_json(self) -> dict:
        return {
            "version": 1,
            "labels": dict(sorted(self.labels.items())),
            "templates": {
                r.value: {
                    "persona": t.persona,
                    "title": t.title,
                    "sections": [
                        {"heading": s.heading, "body": list(s.body), **({"actionable": True} if s.actionable else {})}
                        for s in t.sections
                    ],
                    "task_prefix": t.task_prefix,
                    "required": list(t.required),
                }
                for r, t in sorted(self.templates.items(), key=lambda kv: kv[0].value)
            },
        }


def parse_templates(data: Mapping, schema: OntologySchema | None = None) -> TemplateSet:
    out: dict[Role, Template] = {}
    for name, t in data["templates"].items():
        role = Role(name)
        sections = tuple(
            Section(s["heading"], tuple(s["body"]), bool(s.get("actionable", False))) for s in t["sections"]
        )
        tpl = Template(role, t["persona"], t["title"], sections, tuple(t.get("required", ())),
                       t.get("task_prefix", "Check"))
        if schema is not None:
            for line in tpl.groups():
                entity, fname = _PLACEHOLDER_RE.match(line).groups()
                if not schema.has_entity(entity) or (fname != "*" and not schema.has_path(f"{entity}.{fname}")):
                    raise TemplateError(f"template {name}: placeholder {line} names no ontology field")
            everything = {p: AccessLevel.FULL for p in schema.paths()}
            covered = set(template_paths(tpl, schema, everything))
            for p in tpl.required:
                if p not in covered:
                    raise TemplateError(f"template {name}: required field {p} has no placeholder")
        out[role] = tpl
    missing = set(Role) - set(out)
    if missing:
        raise TemplateError(f"templates missing for roles {sorted(r.value for r in missing)}")
    return TemplateSet(out, dict(data.get("labels", {})))


def load_templates(schema: OntologySchema | None = None, text: str | None = None) -> TemplateSet:
    if text is None:
        text = resources.files("carecircle.data").joinpath("templates.json").read_text("utf-8")
    return parse_templates(json.loads(text), schema)


def expand_placeholder(line: str, schema: OntologySchema, allowed: Mapping[str, AccessLevel]) -> list[str]:
    """Field paths a placeholder line stands for, restricted to ``allowed``, in schema order."""
    m = _PLACEHOLDER_RE.match(line)
    if m is None:
        return []
    entity, fname = m.groups()
    if fname != "*":
        path = f"{entity}.{fname}"
        return [path] if allowed.get(path, AccessLevel.NONE) > AccessLevel.NONE else []
    return [
        f"{entity}.{f.name}" for f in schema.entity(entity).fields
        if f.kind in RENDERED_KINDS and allowed.get(f"{entity}.{f.name}", AccessLevel.NONE) > AccessLevel.NONE
    ]


def template_paths(template: Template, schema: OntologySchema, allowed: Mapping[str, AccessLevel]) -> list[str]:
    out: list[str] = []
    for line in template.groups():
        for p in expand_placeholder(line, schema, allowed):
            if p not in out:
                out.append(p)
    return out


@dataclass(frozen=True)
class FilledTemplate:
    text: str
    annotations: tuple[tuple[int, str, tuple[str, ...]], ...]
    fields: tuple[str, ...]


def template_fill(
    template: Template,
    features: Mapping[str, Feature],
    allowed: Mapping[str, AccessLevel],
    schema: OntologySchema,
    labels: Mapping[str, str] | None = None,
    subject: str = "",
    window: TimeWindow | None = None,
) -> FilledTemplate:
    """Render ``template`` with already-filtered ``features``. Every permitted
    field that the template names gets exactly one statement line."""
    labels = labels or {}
    win = f"{format_iso(window.start)} to {format_iso(window.end)}" if window else ""
    lines = [f"# {template.title.format(subject=subject, window=win, audience='')}".rstrip()]
    annotations = []
    rendered: list[str] = []
    has_data = any(f.source_ids for f in features.values())
    if not has_data:
        lines.append("No readings were recorded in this window.")
    for section in template.sections:
        lines.append("")
        lines.append(f"## {section.heading}")
        for body in section.body:
            if body == "{tasks}":
                tasks = _task_lines(template, features, rendered, labels)
                lines.extend(tasks if tasks else ["- No actions needed."])
                continue
            paths = expand_placeholder(body, schema, allowed)
            if not _PLACEHOLDER_RE.match(body):
                lines.append(body.format(subject=subject, window=win))
                continue
            for p in paths:
                f = features.get(p)
                if f is not None:
                    lines.append(feature_line(f, labels.get(p)))
                    annotations.append((len(lines) - 1, p, f.source_ids))
                else:
                    lines.append(empty_line(p, labels.get(p)))
                if p not in rendered:
                    rendered.append(p)
    text = "\n".join(lines) + "\n"
    # task lines carry their own annotations
    for n, line in enumerate(lines):
        if line.startswith(TASK_BULLET):
            for p in rendered:
                if f"`{p}`" in line:
                    annotations.append((n, p, features[p].source_ids))
    return FilledTemplate(text, tuple(sorted(annotations)), tuple(rendered))


def _task_lines(template: Template, features: Mapping[str, Feature], rendered: Sequence[str],
                labels: Mapping[str, str]) -> list[str]:
    out = []
    for p in rendered:
        f = features.get(p)
        if f is not None and f.source_ids and f.flag in ACTION_FLAGS:
            out.append(feature_line(f, f"{template.task_prefix} {labels.get(p, p).lower()}", bullet=TASK_BULLET))
    return out


def extract_tasks(text: str, template: Template, features: Mapping[str, Feature] | None = None) -> list[Task]:
    """Task lines from the sections marked actionable, and only from those."""
    actionable = {s.heading for s in template.sections if s.actionable}
    tasks = []
    current = None
    for line in text.splitlines():
        if line.startswith("## "):
            current = line[3:]
            continue
        if current in actionable and line.startswith(TASK_BULLET):
            m = re.search(r"`([^`]+)`", line)
            path = m.group(1) if m else None
            ids = features[path].source_ids if features is not None and path in features else ()
            tasks.append(Task(line[len(TASK_BULLET):], path, ids))
    return tasks
