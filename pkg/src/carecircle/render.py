"""Text rendering of features at an access level, and the inverse field scan.

Every rendered statement is one line holding exactly one backticked field
path. The scanner reads back which paths a text exposes and infers the level
from the wording: status words mean status_flag, ``latest``/``reported`` mean
full, and any other numeric content means aggregate.
"""
from __future__ import annotations

import re
from typing import TYPE_CHECKING, Mapping

from ._time import format_iso
from .caregraph import AccessLevel

if TYPE_CHECKING:
    from .profile import Feature

_PATH_RE = re.compile(r"`([A-Z][A-Za-z]*\.[a-z_][a-z0-9_]*)`")
_REFS_RE = re.compile(r"\[refs?:[^\]]*\]")
_ID_RE = re.compile(r"\b(?:ev|ft|ix|gl|br|cr|sn)-[0-9a-f]+\b")
_DIGIT_RE = re.compile(r"\d")
MAX_REFS = 2


def fmt_num(x: float) -> str:
    if abs(x - round(x)) < 1e-9:
        return str(int(round(x)))
    return f"{x:.1f}"


def fmt_signed(x: float) -> str:
    return ("+" if x >= 0 else "-") + fmt_num(abs(x))


def refs_text(ids) -> str:
    ids = list(ids)
    if not ids:
        return ""
    shown = ", ".join(ids[:MAX_REFS])
    more = f" +{len(ids) - MAX_REFS}" if len(ids) > MAX_REFS else ""
    return f" [refs: {shown}{more}]"


def feature_body(feat: "Feature") -> str:
    """The statement for one feature at the level it has been degraded to."""
    if not feat.count and feat.level > AccessLevel.STATUS_FLAG:
        return "no readings in window"
    if feat.level == AccessLevel.STATUS_FLAG:
        return f"status {feat.flag}" if feat.source_ids else "no readings in window"
    unit = f" {feat.unit}" if feat.unit and feat.unit != "score" else ""
    if feat.kind == "code":
        if feat.level == AccessLevel.FULL:
            items = ", ".join(f"{code} at {format_iso(ts)}" for ts, code in feat.values[-3:])
            more = f" (+{len(feat.values) - 3} earlier)" if len(feat.values) > 3 else ""
            return f"reported {items}{more}"
        return f"{feat.count} reports"
    stats = f"mean {fmt_num(feat.mean)}{unit} (min {fmt_num(feat.min)}, max {fmt_num(feat.max)}, n={feat.count})"
    if feat.level == AccessLevel.AGGREGATE:
        return stats
    parts = [f"latest {fmt_num(feat.latest)}{unit}", stats]
    if feat.baseline is not None and feat.delta is not None:
        parts.append(f"baseline {fmt_num(feat.baseline)}, delta {fmt_signed(feat.delta)}")
    return "; ".join(parts)


def feature_line(feat: "Feature", label: str | None = None, bullet: str = "- ") -> str:
    head = f"{label} " if label else ""
    return f"{bullet}{head}`{feat.path}`: {feature_body(feat)}{refs_text(feat.source_ids)}"


def empty_line(path: str, label: str | None = None, bullet: str = "- ") -> str:
    head = f"{label} " if label else ""
    return f"{bullet}{head}`{path}`: no readings in window"


def strip_refs(text: str) -> str:
    return _REFS_RE.sub("", text)


def infer_level(body: str) -> AccessLevel:
    body = strip_refs(body)
    if "no readings" in body or re.search(r"\bstatus\b", body):
        return AccessLevel.STATUS_FLAG
    if "latest" in body or "reported" in body:
        return AccessLevel.FULL
    if _DIGIT_RE.search(body):
        return AccessLevel.AGGREGATE
    return AccessLevel.STATUS_FLAG


def scan_rendering(text: str) -> dict[str, AccessLevel]:
    """Field path -> highest level the text exposes for it."""
    out: dict[str, AccessLevel] = {}
    for line in text.splitlines():
        for m in _PATH_RE.finditer(line):
            rest = line[m.end():]
            body = rest[1:] if rest.startswith(":") else rest
            lvl = infer_level(body)
            if lvl > out.get(m.group(1), AccessLevel.NONE):
                out[m.group(1)] = lvl
    return out


def numeric_tokens(line: str) -> list[str]:
    """Numbers in a statement once refs, ids and field paths are removed."""
    cleaned = _ID_RE.sub("", strip_refs(_PATH_RE.sub("", line)))
    return re.findall(r"\d+(?:\.\d+)?", cleaned)


def exposure_diff(scanned: Mapping[str, AccessLevel],
                  allowed: Mapping[str, AccessLevel]) -> list[tuple[str, str, str]]:
    """(path, exposed level, allowed level) for every path shown beyond what is allowed."""
    leaks = []
    for path, lvl in sorted(scanned.items()):
        ok = allowed.get(path, AccessLevel.NONE)
        if lvl > ok:
            leaks.append((path, lvl.label, ok.label))
    return leaks
