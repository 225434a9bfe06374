from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from carecircle.caregraph import AccessLevel, CareCircle, CareGraph, Role, grant_template, load_role_templates
from carecircle.pipeline import (
    FALLBACK_SIGNATURE, CareEngine, Claim, ConsentDenied, EnginePolicy, EvidenceItem, InsightDraft,
    MockInsightsBackend, Observation, QueryRequest, RateLimiter, RateLimitExceeded, RemoteBackend, SchemaError,
    estimate_confidence, extract_claims, load_templates, needs_notification, provenance_closure, required_level,
    verify_claim,
)
from carecircle.profile import NO_SHARED_DATA, Feature, FeatureSet, ProfileStore, TimeWindow, build_snapshot
from carecircle.retrieval import VectorIndex
from carecircle.render import exposure_diff, numeric_tokens, scan_rendering
from carecircle.vault.audit import AuditLedger

HR = "VitalSign.heart_rate"
STEPS = "VitalSign.steps"
DAY = 86400.0


# -- verifier ---------------------------------------------------------------------

def hr_feature(level=AccessLevel.AGGREGATE, mean=72.0):
    return Feature(HR, "quantity", "bpm", level, count=100, mean=mean, min=60.0, max=90.0,
                   source_ids=("ev-a", "ev-b"))


def snapshot_with(features, window=TimeWindow(0.0, DAY)):
    from carecircle.profile import ProfileSnapshot
    allowed = {p: f.level for p, f in features.items()}
    return ProfileSnapshot("s", window, allowed, dict(features), "snap")


def claim(relation="=", value=72.0, field=HR, stat="mean", **kw):
    return Claim("cl-0", field, relation, value, kw.pop("unit", "bpm"), stat, **kw)


def test_claim_matching_snapshot_mean_is_supported():
    v = verify_claim(claim(value=72.0), [], snapshot_with({HR: hr_feature()}))
    assert v.status == "supported" and set(v.citations) == {"ev-a", "ev-b"}


def test_claim_conflicting_snapshot_is_unsupported():
    v = verify_claim(claim(value=90.0), [], snapshot_with({HR: hr_feature()}))
    assert v.status == "unsupported" and v.citations


def test_claim_on_invisible_field_is_unverifiable():
    snap = snapshot_with({STEPS: Feature(STEPS, "quantity", "steps/hour", AccessLevel.FULL, count=5, mean=300.0,
                                         source_ids=("ev-s",))})
    v = verify_claim(claim(value=72.0), [], snap)
    assert v.status == "unverifiable" and v.reason == "field not visible" and not v.citations


def test_status_flag_cannot_check_a_mean():
    snap = snapshot_with({HR: hr_feature().at_level(AccessLevel.STATUS_FLAG)})
    v = verify_claim(claim(value=72.0), [], snap)
    assert v.status == "unverifiable" and v.reason == "insufficient access level"


@pytest.mark.parametrize("claimed,expected", [(72.0 * 1.0199, "supported"), (72.0 * 0.9801, "supported"),
                                              (72.0 * 1.021, "unsupported"), (72.0 * 0.979, "unsupported")])
def test_two_percent_tolerance(claimed, expected):
    assert verify_claim(claim(value=claimed), [], snapshot_with({HR: hr_feature()})).status == expected


@pytest.mark.parametrize("relation,value,expected", [(">", 70.0, "supported"), (">", 72.0, "unsupported"),
                                                     ("<", 73.0, "supported"), ("<", 60.0, "unsupported")])
def test_threshold_relations(relation, value, expected):
    assert verify_claim(claim(relation, value), [], snapshot_with({HR: hr_feature()})).status == expected


def test_units_convert_before_comparing():
    f = Feature(STEPS, "quantity", "steps/hour", AccessLevel.AGGREGATE, count=10, mean=600.0, source_ids=("x",))
    snap = snapshot_with({STEPS: f})
    assert verify_claim(claim(value=10.0, field=STEPS, unit="steps/min"), [], snap).status == "supported"
    assert verify_claim(claim(value=10.0, field=STEPS, unit="steps/hour"), [], snap).status == "unsupported"


def test_evidence_fact_supports_claim_with_window():
    fact = {"path": HR, "stat": "max", "relation": "=", "value": 88.0, "unit": "bpm", "window": [0.0, DAY],
            "level": "aggregate"}
    ev = [EvidenceItem("ix-1", "summary", "text", 0.9, (fact,))]
    c = claim(value=88.0, stat="max", window=(0.0, DAY))
    v = verify_claim(c, ev, None)
    assert v.status == "supported" and v.citations == ("ix-1",)
    # a different day's window does not match the fact
    assert verify_claim(claim(value=88.0, stat="max", window=(DAY, 2 * DAY)), ev, None).reason == "field not visible"


def test_occurrence_claims():
    fact = {"path": "Symptom.name", "stat": "mean", "relation": "occurred", "value": "cough",
            "unit": None, "window": [0.0, DAY], "ts": 500.0, "level": "full"}
    ev = [EvidenceItem("ix-o", "profile_item", "t", 0.5, (fact,))]
    hit = Claim("c", "Symptom.name", "occurred", "cough", None, "mean", (0.0, DAY))
    miss = Claim("c", "Symptom.name", "occurred", "fever", None, "mean", (0.0, DAY))
    elsewhere = Claim("c", "Symptom.name", "occurred", "cough", None, "mean", (1000.0, DAY))
    assert verify_claim(hit, ev, None).status == "supported"
    assert verify_claim(miss, ev, None).status == "unsupported"
    assert verify_claim(elsewhere, ev, None).status == "unsupported"


def test_trend_claims_need_full_level():
    full = Feature(HR, "quantity", "bpm", AccessLevel.FULL, count=10, mean=80.0, delta=5.0, baseline=75.0,
                   baseline_mad=1.0, source_ids=("a",))
    up = Claim("c", HR, "trend_up", None, None, "delta")
    assert required_level(up) == AccessLevel.FULL
    assert verify_claim(up, [], snapshot_with({HR: full})).status == "supported"
    assert verify_claim(Claim("c", HR, "trend_down", None, None, "delta"), [],
                        snapshot_with({HR: full})).status == "unsupported"
    agg = snapshot_with({HR: full.at_level(AccessLevel.AGGREGATE)})
    assert verify_claim(up, [], agg).reason == "insufficient access level"


def test_required_levels():
    assert required_level(claim()) == AccessLevel.AGGREGATE
    assert required_level(claim(stat="latest")) == AccessLevel.FULL
    assert required_level(claim(stat="count", value=3)) == AccessLevel.AGGREGATE


def test_extract_claims_skips_stylistic_observations():
    obs = (
        Observation("HR mean 72", ("a",), HR, "mean", "=", 72.0, "bpm"),
        Observation("You are doing well", ("a",)),
        Observation("steps above 100", ("b",), STEPS, "mean", ">", 100.0, "steps/hour"),
        Observation("Keep it up", ("b",)),
        Observation("HR trending up", ("a",), HR, None, "trend_up"),
    )
    claims = extract_claims(InsightDraft("s", obs))
    assert [c.relation for c in claims] == ["=", ">", "trend_up"]
    assert claims[2].stat == "delta"
    assert len({c.id for c in claims}) == 3


def test_observation_without_refs_is_a_schema_error():
    with pytest.raises(SchemaError):
        Observation("HR mean 72", (), HR, "mean", "=", 72.0)
    with pytest.raises(SchemaError):
        InsightDraft.from_json({"summary": "x", "observations": [{"statement": "y", "data_refs": []}]})
    with pytest.raises(SchemaError):
        InsightDraft.from_json(["not", "an", "object"])


def test_provenance_closure():
    draft = InsightDraft("s", (Observation("a", ("ix-1",)), Observation("b", ("ev-zz", "src-1"))))
    assert provenance_closure(draft, ["ix-1"], {"src-1"}) == ("ev-zz",)


# -- engine fixtures ----------------------------------------------------------------

MEMBERS = (("p", Role.CARE_PRIMARY), ("m", Role.FAMILY_MONITOR), ("n", Role.NUDGE_ONLY))


def make_engine(world, backend=None, members=MEMBERS, grant=True, policy=None, ledger=None, clock=None,
                subject_index=0):
    """A fresh graph over one of the small world's stores."""
    spec = sorted(world.corpus.circles, key=lambda c: c.id)[subject_index]
    subject = spec.subject
    schema = world.schema
    window = world.window
    ledger = ledger if ledger is not None else AuditLedger()
    graph = CareGraph(schema, ledger)
    for a in (subject,) + tuple(a for a, _ in members):
        graph.add_actor(a)
    graph.add_circle(CareCircle("cx", subject, ((subject, Role.SUBJECT),) + tuple(members)))
    ref = load_role_templates(schema)
    if grant:
        for a, r in members:
            grant_template(graph, subject, a, ref[r], window.start - DAY, window.end + 365 * DAY)
    engine = CareEngine(schema, graph, load_templates(schema), backend or MockInsightsBackend(seed=3),
                        ledger=ledger, policy=policy, clock=clock or (lambda: window.end))
    store = world.stores[subject]
    engine.add_store(store, window, index=False)
    engine.indexes[subject] = VectorIndex.from_json(world.engine.indexes[subject].to_json())  # briefings write to it
    return engine, subject, ref


@pytest.fixture()
def engine(small_world):
    eng, subject, ref = make_engine(small_world)
    yield eng, subject, ref
    eng.close()


def test_unknown_or_outside_actor(engine):
    eng, subject, _ = engine
    eng.graph.add_actor("outsider")
    with pytest.raises(ConsentDenied):
        eng.build_context(QueryRequest("outsider", subject, "how is my heart"))


def test_empty_permission_member_gets_no_shared_data(small_world):
    eng, subject, _ = make_engine(small_world, grant=False)
    try:
        ctx = eng.build_context(QueryRequest("p", subject, "how is the heart rate"))
        # general guidance carries no subject data, so it is all that can be retrieved
        assert all(e.kind == "guideline" and not e.facts for e in ctx.prompts.evidence)
        assert ctx.claims == () and ctx.draft.observations == ()
        assert NO_SHARED_DATA in ctx.prompts.user
        assert ctx.fabricated_refs == ()
    finally:
        eng.close()


def test_empty_permission_with_backend_down(small_world):
    eng, subject, _ = make_engine(small_world, backend=MockInsightsBackend(available=False), grant=False)
    try:
        ctx = eng.build_context(QueryRequest("m", subject, "anything"))
        assert ctx.fallback and ctx.model_signature == FALLBACK_SIGNATURE
        assert ctx.draft.summary == NO_SHARED_DATA and not ctx.draft.observations
    finally:
        eng.close()


def test_k_bounds_evidence(engine):
    eng, subject, _ = engine
    ctx = eng.build_context(QueryRequest("p", subject, "heart rate and steps", k=6))
    assert len(ctx.evidence_ids) == 6 and len(set(ctx.evidence_ids)) == 6
    assert [e.id for e in ctx.prompts.evidence] == list(ctx.evidence_ids)


def test_mock_provenance_is_exact_without_faults(small_world):
    ticks = iter(range(10**6))
    eng, subject, _ = make_engine(small_world, clock=lambda: small_world.window.end + 5.0 * next(ticks))
    queries = ["heart rate", "sleep", "steps", "medication adherence", "blood oxygen"]
    refs = matched = 0
    for i in range(100):
        ctx = eng.build_context(QueryRequest(("p", "m")[i % 2], subject, queries[i % len(queries)]))
        known = set(ctx.evidence_ids)
        for r in ctx.draft.data_references:
            refs += 1
            matched += r in known
        assert ctx.fabricated_refs == ()
        assert all(v.status == "supported" for v in ctx.verdicts)
    eng.close()
    assert refs > 0 and matched == refs


def test_fabricated_references_are_caught(small_world):
    backend = MockInsightsBackend(seed=5, r=1.0)
    eng, subject, _ = make_engine(small_world, backend=backend)
    try:
        ctx = eng.build_context(QueryRequest("p", subject, "heart rate"))
        fabricated = {e.emitted_ref for e in backend.manifest[-1].entries if e.fabricated}
        assert fabricated and set(ctx.fabricated_refs) == fabricated
    finally:
        eng.close()


def test_fallback_when_backend_down(small_world):
    eng, subject, ref = make_engine(small_world, backend=MockInsightsBackend(available=False))
    try:
        ctx = eng.build_context(QueryRequest("m", subject, "heart rate"))
        assert ctx.fallback and ctx.claims == () and ctx.draft.confidence == "low"
        allowed = {p: AccessLevel.parse(l) for p, l in ref[Role.FAMILY_MONITOR].items()}
        for obs in ctx.draft.observations:
            for path, lvl in scan_rendering(obs.statement).items():
                assert lvl <= min(allowed[path], AccessLevel.AGGREGATE)
    finally:
        eng.close()


def test_fallback_then_restore_audits_both_signatures(small_world):
    backend = MockInsightsBackend(seed=1)
    ledger = AuditLedger()
    eng, subject, _ = make_engine(small_world, backend=backend, ledger=ledger)
    try:
        backend.available = False
        first = eng.build_context(QueryRequest("p", subject, "heart rate"))
        backend.available = True
        second = eng.build_context(QueryRequest("p", subject, "heart rate"))
        assert first.fallback and not second.fallback
        sigs = [r.model_signature for r in ledger.records("llm_turn")]
        assert sigs == [FALLBACK_SIGNATURE, backend.signature]
    finally:
        eng.close()


def test_timeout_falls_back(small_world):
    eng, subject, _ = make_engine(small_world, backend=MockInsightsBackend(delay_s=0.5),
                                  policy=EnginePolicy(timeout_s=0.05))
    try:
        assert eng.build_context(QueryRequest("p", subject, "sleep")).fallback
    finally:
        eng.close()


def test_every_turn_is_audited(small_world):
    ledger = AuditLedger()
    eng, subject, _ = make_engine(small_world, ledger=ledger)
    try:
        n = 0
        for i, q in enumerate(["heart", "sleep", "steps", "weight", "symptoms", "heart rate", "oxygen"]):
            ctx = eng.build_context(QueryRequest(("p", "m", "n")[i % 3], subject, q))
            n += 1
            rec = ledger.records("llm_turn")[-1]
            assert rec.prompt_hash == ctx.prompts.hash
            assert list(rec.retrieved_ids) == list(ctx.evidence_ids)
            assert rec.model_signature == ctx.model_signature
        assert ledger.count("llm_turn") == n
        assert all(ledger.verify_all().values())
    finally:
        eng.close()


def test_rate_limiter_with_mock_clock():
    lim = RateLimiter(budget=5, window_s=60.0)
    for i in range(5):
        lim.acquire("a", 100.0 + i)
    with pytest.raises(RateLimitExceeded) as exc:
        lim.acquire("a", 110.0)
    assert exc.value.retry_after == pytest.approx(50.0)
    lim.acquire("b", 110.0)  # budgets are per actor
    lim.acquire("a", 160.0)  # the first call has aged out


def test_engine_rate_limit(small_world):
    now = [small_world.window.end]
    eng, subject, _ = make_engine(small_world, policy=EnginePolicy(rate_budget=3, rate_window_s=60.0),
                                  clock=lambda: now[0])
    try:
        for _ in range(3):
            eng.build_context(QueryRequest("n", subject, "steps"))
        with pytest.raises(RateLimitExceeded) as exc:
            eng.build_context(QueryRequest("n", subject, "steps"))
        assert 0 < exc.value.retry_after <= 60
        now[0] += 61
        eng.build_context(QueryRequest("n", subject, "steps"))
    finally:
        eng.close()


def _prompt_exposure(ctx):
    """Highest level each field reaches in the prompt and in the evidence facts."""
    levels = dict(scan_rendering(ctx.prompts.user))
    for e in ctx.prompts.evidence:
        for f in e.facts:
            lvl = AccessLevel.parse(f["level"])
            if lvl > levels.get(f["path"], AccessLevel.NONE):
                levels[f["path"]] = lvl
    return levels


@pytest.mark.parametrize("actor,role", MEMBERS)
def test_prompt_never_exceeds_permissions(engine, actor, role):
    eng, subject, ref = engine
    allowed = {p: AccessLevel.parse(l) for p, l in ref[role].items()}
    for q in ("heart rate", "sleep", "steps", "medication", "symptoms cough"):
        ctx = eng.build_context(QueryRequest(actor, subject, q, chat_context=(("user", "what about weight"),)))
        assert exposure_diff(_prompt_exposure(ctx), allowed) == []
        for e in ctx.prompts.evidence:
            if e.kind == "prior_output":
                continue
            assert e.kind == "guideline" or e.facts


def test_scope_narrows_the_prompt(engine):
    eng, subject, _ = engine
    ctx = eng.build_context(QueryRequest("p", subject, "heart rate", scope=(HR,)))
    assert set(_prompt_exposure(ctx)) <= {HR}


# -- briefings ---------------------------------------------------------------------

def test_circle_of_four_gets_four_clean_briefings(engine):
    eng, subject, ref = engine
    w = eng.windows[subject]
    briefs = eng.generate_briefings(subject, w)
    assert sorted(briefs) == sorted(["p", "m", "n", subject])
    assert eng.rejections == []
    for actor, b in briefs.items():
        role = b.role
        allowed = ({p: AccessLevel.FULL for p in eng.schema.paths()} if role == Role.SUBJECT
                   else {p: AccessLevel.parse(l) for p, l in ref[role].items()})
        assert exposure_diff(scan_rendering(b.text), allowed) == []
        assert b.snapshot_id
        for line, path, ids in b.annotations:
            assert ids and path in b.text.splitlines()[line]


def test_status_flag_briefing_has_no_numbers(engine):
    eng, subject, _ = engine
    b = eng.generate_briefings(subject, eng.windows[subject])["n"]
    body = [ln for ln in b.text.splitlines()[1:] if not ln.startswith("#")]
    assert body and all(numeric_tokens(ln) == [] for ln in body)
    assert set(b.fields.values()) <= {"status_flag"}


def test_empty_window_briefing(engine):
    eng, subject, _ = engine
    w = TimeWindow(eng.windows[subject].start - 30 * DAY, eng.windows[subject].start - 20 * DAY)
    b = eng.generate_briefings(subject, w)["p"]
    assert "No readings were recorded in this window." in b.text
    assert b.tasks == () and b.confidence == "low" and not b.notify


def test_briefings_become_owner_only_evidence(small_world):
    eng, subject, _ = make_engine(small_world)
    try:
        eng.indexes[subject] = VectorIndex()
        briefs = eng.generate_briefings(subject, eng.windows[subject])
        owners = {e.meta["owner"] for e in eng.indexes[subject].entries.values() if e.kind == "prior_output"}
        assert owners == set(briefs)
        ctx = eng.build_context(QueryRequest("n", subject, "briefing summary", k=10))
        kinds = {eng.indexes[subject].get(i).meta.get("owner") for i in ctx.evidence_ids}
        assert kinds <= {"n"}
    finally:
        eng.close()


def _fs(missing, counts=(10,)):
    feats = {f"VitalSign.f{i}": Feature(f"VitalSign.f{i}", "quantity", count=c, mean=1.0, source_ids=(f"x{i}",))
             for i, c in enumerate(counts)}
    return FeatureSet("s", TimeWindow(0, DAY), feats, missing)


def test_confidence_levels():
    assert estimate_confidence(_fs(0.0)) == "high"
    assert estimate_confidence(_fs(0.12)) == "medium"
    assert estimate_confidence(_fs(0.5)) == "low"
    assert estimate_confidence(_fs(0.0, counts=(10, 2))) == "medium"
    assert estimate_confidence(FeatureSet("s", TimeWindow(0, DAY), {}, 0.0)) == "low"


def test_notification_rule():
    calm = Feature(HR, "quantity", delta=2.0, baseline_mad=1.0)
    jump = Feature(HR, "quantity", delta=3.5, baseline_mad=1.0)
    urgent = Feature(HR, "quantity", flag="urgent")
    assert not needs_notification({HR: calm})
    assert needs_notification({HR: jump})
    assert needs_notification({HR: urgent})


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(levels=st.dictionaries(st.sampled_from(
    [HR, STEPS, "VitalSign.spo2", "VitalSign.sleep_duration", "Medication.adherence"]),
    st.sampled_from([AccessLevel.STATUS_FLAG, AccessLevel.AGGREGATE, AccessLevel.FULL]), max_size=5))
def test_snapshot_text_matches_allowed_levels(small_world, levels):
    store = next(iter(small_world.stores.values()))
    snap = build_snapshot(store, levels, window=small_world.window)
    assert exposure_diff(scan_rendering(snap.text), levels) == []


# -- remote backend ----------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    mode = "good"

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.mode == "garbage":
            out = b"<html>oops</html>"
        else:
            ev = body["prompt"]["evidence"]
            out = json.dumps({"summary": "remote", "confidence": "medium", "observations": [
                {"statement": e["text"][:40], "data_refs": [e["id"]]} for e in ev[:2]]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture()
def server():
    handler = type("H", (_Handler,), {})
    srv = HTTPServer(("127.0.0.1", 0), handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv, handler
    srv.shutdown()
    srv.server_close()


def test_remote_backend_round_trip(small_world, server):
    srv, _ = server
    backend = RemoteBackend(f"http://127.0.0.1:{srv.server_port}", "demo-model", timeout_s=5)
    eng, subject, _ = make_engine(small_world, backend=backend)
    try:
        ctx = eng.build_context(QueryRequest("p", subject, "heart rate"))
        assert not ctx.fallback and ctx.draft.summary == "remote"
        assert ctx.draft.data_references <= set(ctx.evidence_ids)
        assert ctx.model_signature == backend.signature
    finally:
        eng.close()


def test_remote_backend_garbage_falls_back(small_world, server):
    srv, handler = server
    handler.mode = "garbage"
    backend = RemoteBackend(f"http://127.0.0.1:{srv.server_port}", "demo-model", timeout_s=5)
    eng, subject, _ = make_engine(small_world, backend=backend)
    try:
        assert eng.build_context(QueryRequest("p", subject, "heart rate")).fallback
    finally:
        eng.close()


def test_remote_backend_unreachable_falls_back(small_world):
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    port = srv.server_port
    srv.server_close()
    eng, subject, _ = make_engine(small_world, backend=RemoteBackend(f"http://127.0.0.1:{port}", "m", timeout_s=2))
    try:
        ctx = eng.build_context(QueryRequest("p", subject, "heart rate"))
        assert ctx.fallback and ctx.model_signature == FALLBACK_SIGNATURE
    finally:
        eng.close()
