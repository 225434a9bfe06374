"""Materialise a corpus as a running engine: graph, consents, stores and indexes."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

from .._time import DAY
from ..caregraph import AccessLevel, CareCircle, CareGraph, RoleTemplates, Role, grant_template, load_role_templates
from ..connectors.capture import PipelineReport
from ..ontology import OntologySchema, load_default_ontology
from ..pipeline import CareEngine, EnginePolicy, MockInsightsBackend, TemplateSet, load_templates
from ..profile import ProfileStore, TimeWindow
from ..vault.audit import AuditLedger
from .corpus import CircleSpec, SyntheticCorpus, build_store

CONSENT_VALIDITY = 365 * DAY


def circle_of(spec: CircleSpec) -> CareCircle:
    return CareCircle(spec.id, spec.subject, tuple((a, Role(r)) for a, r in spec.members))


def allowed_for(role: Role, templates: RoleTemplates, schema: OntologySchema) -> dict[str, AccessLevel]:
    if role == Role.SUBJECT:
        return {p: AccessLevel.FULL for p in schema.paths()}
    return {p: AccessLevel.parse(l) for p, l in templates[role].items() if AccessLevel.parse(l) > AccessLevel.NONE}


def provision(graph: CareGraph, spec: CircleSpec, templates: RoleTemplates, window: TimeWindow) -> None:
    """Add the circle's actors and grant each member its role template."""
    for actor, _ in spec.members:
        if actor not in graph.actors:
            graph.add_actor(actor)
    graph.add_circle(circle_of(spec))
    for actor, role in spec.members:
        if role == Role.SUBJECT.value:
            continue
        grant_template(graph, spec.subject, actor, templates[Role(role)], window.start - DAY,
                       window.end + CONSENT_VALIDITY)


@dataclass
class World:
    corpus: SyntheticCorpus
    schema: OntologySchema
    graph: CareGraph
    ledger: AuditLedger
    engine: CareEngine
    templates: TemplateSet
    reference: RoleTemplates
    stores: dict[str, ProfileStore]
    capture: dict[str, PipelineReport] = field(default_factory=dict)

    @property
    def window(self) -> TimeWindow:
        return self.corpus.window

    def close(self) -> None:
        self.engine.close()


def build_world(
    corpus: SyntheticCorpus,
    backend=None,
    role_templates: RoleTemplates | None = None,
    ledger: AuditLedger | None = None,
    policy: EnginePolicy | None = None,
    index_evidence: bool = True,
    stores: Mapping[str, ProfileStore] | None = None,
) -> World:
    """``role_templates`` provisions the consents; the shipped templates stay the
    reference that exposure is judged against."""
    schema = load_default_ontology()
    ledger = ledger if ledger is not None else AuditLedger()
    reference = load_role_templates(schema)
    provisioned = role_templates if role_templates is not None else copy.deepcopy(reference)
    graph = CareGraph(schema, ledger)
    window = corpus.window
    for spec in corpus.circles:
        provision(graph, spec, provisioned, window)
    templates = load_templates(schema)
    backend = backend if backend is not None else MockInsightsBackend(seed=corpus.config.seed)
    engine = CareEngine(schema, graph, templates, backend, ledger=ledger, policy=policy,
                        clock=lambda: window.end)
    built: dict[str, ProfileStore] = {}
    capture: dict[str, PipelineReport] = {}
    for spec in corpus.circles:
        if stores is not None and spec.subject in stores:
            store = stores[spec.subject]
        else:
            store, capture[spec.id] = build_store(corpus.streams[spec.id], corpus.config, schema, ledger=ledger)
        built[spec.subject] = store
        engine.add_store(store, window, index=index_evidence)
    return World(corpus, schema, graph, ledger, engine, templates, reference, built, capture)
