"""Evaluation suites over a materialised world.

Every suite returns a plain JSON-able dict so reports stay byte-comparable
across runs. Wall-clock timings are deliberately kept out of the results.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.stats import binom

from ..caregraph import AccessLevel, CareGraph, Role, RoleTemplates
from ..connectors.replay import (AdapterMissing, VendorAdapter, VendorTrace, load_packaged_trace, packaged_traces,
                                 replay_trace)
from ..pipeline import (MockInsightsBackend, QueryRequest, RateLimiter, TemplateSet, generate_briefings,
                        template_paths, verify_claim)
from ..profile import enrich_features
from ..render import exposure_diff, scan_rendering
from ..retrieval import VectorIndex
from .world import World, allowed_for, circle_of, provision

QUERIES = (
    "How has heart rate looked over the last days?",
    "Any change in sleep lately?",
    "Is blood pressure stable?",
    "How is medication adherence going?",
    "Were there any symptoms or falls?",
    "How active has the day been?",
)


def _renderable(world: World, role: Role, allowed: Mapping[str, AccessLevel]) -> list[str]:
    return template_paths(world.templates[role], world.schema, allowed)


# ---------------------------------------------------------------------------
# Exposure
# ---------------------------------------------------------------------------


def compare_briefings(briefings: Mapping, circle_id: str, reference: Mapping[Role, Mapping[str, AccessLevel]],
                      schema) -> list[dict]:
    """The automated comparator: rendered content against the reference allowed set."""
    leaks = []
    for actor in sorted(briefings):
        b = briefings[actor]
        allowed = allowed_for(b.role, reference, schema)
        for path, shown, ok in exposure_diff(scan_rendering(b.text), allowed):
            leaks.append({"circle": circle_id, "actor": actor, "role": b.role.value, "field": path,
                          "exposed_level": shown, "allowed_level": ok, "briefing": b.id})
    return leaks


def run_exposure_eval(world: World) -> dict:
    """Briefings for every member of every circle, field-scanned against the
    member's resolved permissions and the reference role template."""
    engine, graph, window = world.engine, world.graph, world.window
    roles: dict[str, dict] = {}
    leaks: list[dict] = []
    withheld: list[dict] = []
    n_before = len(engine.rejections)
    for spec in sorted(world.corpus.circles, key=lambda c: c.id):
        circle = graph.circle_of_subject(spec.subject)
        briefs = engine.generate_briefings(spec.subject, window, now=window.end, circle=circle)
        for rej in engine.rejections[n_before:]:
            withheld.append({"circle": spec.id, "actor": rej.audience, "role": rej.role.value,
                             "reason": rej.reason, "fields": [p for p, _, _ in rej.leaks]})
        n_before = len(engine.rejections)
        for actor, b in sorted(briefs.items()):
            perm = graph.resolve_permissions(actor, spec.subject, window.end)
            granted = {p: perm.level(p) for p in perm.fields}
            for path, shown, ok in exposure_diff(scan_rendering(b.text), granted):
                leaks.append({"circle": spec.id, "actor": actor, "role": b.role.value, "field": path,
                              "exposed_level": shown, "allowed_level": ok, "briefing": b.id,
                              "against": "permissions"})
        for leak in compare_briefings(briefs, spec.id, world.reference, world.schema):
            leaks.append({**leak, "against": "template"})
        for actor, b in sorted(briefs.items()):
            expected = sorted(_renderable(world, b.role, allowed_for(b.role, world.reference, world.schema)))
            exposed = sorted(scan_rendering(b.text))
            r = roles.setdefault(b.role.value, {"expected": len(expected), "exposed_fields": set(),
                                                "briefings": 0, "mismatched": 0, "leaked": 0, "shown": 0})
            r["briefings"] += 1
            r["exposed_fields"].update(exposed)
            r["shown"] += len(exposed)
            if exposed != expected:
                r["mismatched"] += 1
    # the same (briefing, field) may be caught by both comparisons
    distinct = {(l["briefing"], l["field"], l["role"]) for l in leaks}
    for _, _, role in distinct:
        roles[role]["leaked"] += 1
    out_roles = {}
    for role, r in sorted(roles.items()):
        out_roles[role] = {
            "expected": r["expected"],
            "exposed": len(r["exposed_fields"]),
            "briefings": r["briefings"],
            "mismatched_briefings": r["mismatched"],
            "leaked_fields": r["leaked"],
            "leak_rate": r["leaked"] / r["shown"] if r["shown"] else 0.0,
        }
    leaks.sort(key=lambda l: (l["circle"], l["actor"], l["field"], l["against"]))
    return {
        "circles": len(world.corpus.circles),
        "briefings": sum(r["briefings"] for r in roles.values()),
        "roles": out_roles,
        "leak_count": len(distinct),
        "leaks": leaks,
        "withheld": withheld,
    }


# ---------------------------------------------------------------------------
# Misconfiguration injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Injection:
    run: int
    circle: str
    role: str
    field: str
    kind: str  # add | over_level | rename_label
    before: str
    after: str

    def to_json(self) -> dict:
        return {"run": self.run, "circle": self.circle, "role": self.role, "field": self.field,
                "kind": self.kind, "before": self.before, "after": self.after}


@dataclass
class RunPlan:
    run: int
    circle: str
    templates: RoleTemplates
    labels: Mapping[str, str]
    injection: Injection | None = None
    control: Injection | None = None


def _data_fields(world: World, subject: str) -> set[str]:
    fs = enrich_features(world.stores[subject], world.window)
    return {p for p, f in fs.features.items() if f.source_ids and f.count}


def draw_mutation(world: World, rng: np.random.Generator, run: int, spec) -> Injection:
    """One field added or raised one level for a role present in the circle,
    chosen so the change reaches the rendering."""
    has_data = _data_fields(world, spec.subject)
    candidates: list[tuple[str, str, str, str, str]] = []
    for role_name in sorted({r for _, r in spec.members if r != Role.SUBJECT.value}):
        role = Role(role_name)
        ref = world.reference[role]
        full = {p: AccessLevel.FULL for p in world.schema.paths()}
        for p in _renderable(world, role, full):
            lvl = ref.get(p, AccessLevel.NONE)
            if lvl == AccessLevel.NONE:
                candidates.append((role_name, p, "add", "none", "status_flag"))
            elif lvl < AccessLevel.FULL and p in has_data:
                candidates.append((role_name, p, "over_level", lvl.label, AccessLevel(lvl + 1).label))
    if not candidates:
        raise ValueError(f"circle {spec.id} offers no detectable mutation")
    role, path, kind, before, after = candidates[int(rng.integers(len(candidates)))]
    return Injection(run, spec.id, role, path, kind, before, after)


def inject_misconfig(world: World, n_injections: int, seed: int, n_runs: int = 120,
                     n_controls: int = 0) -> list[RunPlan]:
    """Plan ``n_runs`` briefing runs; ``n_injections`` of them get one mutated
    role template and ``n_controls`` of the clean ones get a label rename."""
    if not 0 <= n_injections <= n_runs:
        raise ValueError("n_injections must lie in [0, n_runs]")
    if n_controls > n_runs - n_injections:
        raise ValueError("not enough clean runs for the requested controls")
    rng = np.random.default_rng([seed, 120])
    order = rng.permutation(n_runs)
    injected = set(int(i) for i in order[:n_injections])
    controls = set(int(i) for i in order[n_injections:n_injections + n_controls])
    circles = sorted(world.corpus.circles, key=lambda c: c.id)
    plans = []
    for run in range(n_runs):
        spec = circles[run % len(circles)]
        templates = copy.deepcopy(world.reference)
        labels = dict(world.templates.labels)
        plan = RunPlan(run, spec.id, templates, labels)
        if run in injected:
            inj = draw_mutation(world, rng, run, spec)
            templates[Role(inj.role)][inj.field] = AccessLevel.parse(inj.after)
            plan.injection = inj
        elif run in controls:
            role = Role(sorted(r for _, r in spec.members if r != Role.SUBJECT.value)[0])
            paths = _renderable(world, role, allowed_for(role, world.reference, world.schema))
            path = paths[int(rng.integers(len(paths)))]
            old = labels.get(path, path)
            labels[path] = f"{old} (renamed)"
            plan.control = Injection(run, spec.id, role.value, path, "rename_label", old, labels[path])
        plans.append(plan)
    return plans


def run_misconfig_eval(world: World, n_injections: int = 12, n_runs: int = 120, seed: int = 0,
                       n_controls: int = 6) -> dict:
    """Each run provisions a fresh graph from its plan, renders the circle's
    briefings and lets the comparator judge them against the reference."""
    plans = inject_misconfig(world, n_injections, seed, n_runs, n_controls)
    window = world.window
    detected, false_alarms, control_alarms, missed = [], [], [], []
    for plan in plans:
        spec = world.corpus.circle(plan.circle)
        graph = CareGraph(world.schema)
        provision(graph, spec, plan.templates, window)
        templates = TemplateSet(world.templates.templates, dict(plan.labels))
        briefs = generate_briefings(world.stores[spec.subject], circle_of(spec), templates, window, graph,
                                    VectorIndex(), now=window.end)
        leaks = compare_briefings(briefs, spec.id, world.reference, world.schema)
        flagged = bool(leaks)
        if plan.injection is not None:
            hit = any(l["field"] == plan.injection.field and l["role"] == plan.injection.role for l in leaks)
            (detected if flagged and hit else missed).append({**plan.injection.to_json(), "leaks": leaks})
        elif flagged:
            (control_alarms if plan.control is not None else false_alarms).append(
                {"run": plan.run, "circle": plan.circle, "leaks": leaks})
    return {
        "runs": n_runs,
        "injected": n_injections,
        "detected": len(detected),
        "missed": missed,
        "clean_runs": n_runs - n_injections,
        "false_alarms": len(false_alarms) + len(control_alarms),
        "controls": n_controls,
        "control_alarms": len(control_alarms),
        "injections": sorted(detected + missed, key=lambda d: d["run"]),
        "false_alarm_runs": sorted(false_alarms + control_alarms, key=lambda d: d["run"]),
        "controls_manifest": [p.control.to_json() for p in plans if p.control is not None],
    }


# ---------------------------------------------------------------------------
# Fidelity and provenance
# ---------------------------------------------------------------------------


def binomial_interval(n: int, p: float, level: float = 0.95) -> tuple[float, float]:
    """Central interval for a proportion of ``n`` Bernoulli(``p``) trials."""
    if n == 0:
        return (0.0, 1.0)
    a = (1 - level) / 2
    return float(binom.ppf(a, n, p)) / n, float(binom.ppf(1 - a, n, p)) / n


def _turns(world: World, n_turns: int) -> Iterable[QueryRequest]:
    circles = sorted(world.corpus.circles, key=lambda c: c.id)
    n = len(circles)
    for t in range(n_turns):
        spec = circles[t % n]
        rnd = t // n
        actors = sorted(a for a, _ in spec.members)
        yield QueryRequest(actors[rnd % len(actors)], spec.subject, QUERIES[rnd % len(QUERIES)])


def run_fidelity_eval(world: World, n_turns: int = 10000, r: float = 0.06, q: float = 0.0,
                      seed: int = 0) -> dict:
    """Fact-level precision/recall of mock-backend statements against the
    injection manifest, provenance accuracy of citations, and the verifier's
    confusion matrix against which claims were corrupted."""
    engine = world.engine
    backend = MockInsightsBackend(seed=seed, r=r, q=q)
    engine.backend = backend
    engine.limiter = RateLimiter(n_turns + 1, engine.policy.rate_window_s)
    statements = correct = relevant = covered = 0
    cited = cited_ok = 0
    bf_correct = bf_statements = 0
    confusion = {"corrupted": {"supported": 0, "unsupported": 0, "unverifiable": 0},
                 "faithful": {"supported": 0, "unsupported": 0, "unverifiable": 0}}
    fallbacks = 0
    for req in _turns(world, n_turns):
        ctx = engine.build_context(req)
        if ctx.fallback:
            fallbacks += 1
            continue
        turn = backend.manifest[-1]
        if turn.prompt_hash != ctx.prompts.hash:
            raise RuntimeError("manifest out of step with the engine's turns")
        entries = {f"cl-{e.index:03d}": e for e in turn.entries}
        evidence = {e.id: e for e in ctx.prompts.evidence}
        with_facts = {e.id for e in ctx.prompts.evidence if e.facts}
        relevant += len(with_facts)
        hit: set[str] = set()
        verdicts = {v.claim_id: v for v in ctx.verdicts}
        for claim in ctx.claims:
            statements += 1
            refs_exist = all(ref in evidence for ref in claim.data_refs)
            ok = refs_exist and all(
                verify_claim(claim, [evidence[ref]], None).status == "supported" for ref in claim.data_refs)
            if ok:
                correct += 1
                hit.update(ref for ref in claim.data_refs if ref in with_facts)
            for ref in claim.data_refs:
                cited += 1
                item = evidence.get(ref)
                if item is not None and any(f.get("path") == claim.field for f in item.facts):
                    cited_ok += 1
            entry = entries[claim.id]
            row = "corrupted" if entry.corrupted else "faithful"
            confusion[row][verdicts[claim.id].status] += 1
        covered += len(hit)
        # brute-force recount from the manifest alone
        bf_statements += len(turn.entries)
        bf_correct += sum(1 for e in turn.entries if not e.fabricated and not e.corrupted)
    precision = correct / statements if statements else 1.0
    recall = covered / relevant if relevant else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    lo, hi = binomial_interval(statements, 1.0 - r - q + r * q)
    return {
        "turns": n_turns,
        "fabrication_rate": r,
        "corruption_rate": q,
        "seed": seed,
        "statements": statements,
        "correct": correct,
        "relevant_items": relevant,
        "covered_items": covered,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "provenance_accuracy": cited_ok / cited if cited else 1.0,
        "citations": cited,
        "expected_precision": 1.0 - r - q + r * q,
        "precision_ci95": [lo, hi],
        "confusion": confusion,
        "brute_force": {"statements": bf_statements, "correct": bf_correct,
                        "agrees": bf_statements == statements and bf_correct == correct},
        "fallbacks": fallbacks,
    }


# ---------------------------------------------------------------------------
# Compatibility replay
# ---------------------------------------------------------------------------


def run_compat_eval(traces: Iterable[VendorTrace] | None = None) -> dict:
    """Replay each trace through its vendor adapter and score metric coverage."""
    if traces is None:
        traces = [load_packaged_trace(n) for n in packaged_traces()]
    vendors = {}
    for trace in traces:
        try:
            adapter = VendorAdapter.load(trace.vendor)
        except FileNotFoundError:
            adapter = None
        try:
            report, _ = replay_trace(trace, adapter)
        except AdapterMissing as exc:
            vendors[trace.vendor] = {"vendor": trace.vendor, "mode": trace.mode, "pass_rate": None,
                                     "skipped": True, "error": str(exc)}
            continue
        d = report.to_json()
        exp = d["metrics_expected"]
        d["arithmetic_ok"] = d["pass_rate"] is None or (exp > 0 and d["pass_rate"] == d["metrics_synced"] / exp)
        vendors[trace.vendor] = d
    return {"vendors": dict(sorted(vendors.items()))}


__all__ = [
    "Injection", "QUERIES", "RunPlan", "binomial_interval", "compare_briefings", "draw_mutation", "inject_misconfig",
    "run_compat_eval", "run_exposure_eval", "run_fidelity_eval", "run_misconfig_eval",
]
