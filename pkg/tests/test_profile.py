from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from carecircle.caregraph import AccessLevel, Role, load_role_templates
from carecircle.connectors import ProfileEvent, Provenance
from carecircle.ontology import ValidationError, validate_event
from carecircle.profile import (
    NO_SHARED_DATA, PeriodicCadence, ProfileStore, ScheduleCadence, TimeWindow, activity_class, build_snapshot,
    compute_baseline, compute_delta, enrich_features, sleep_score, token_count,
)
from carecircle.render import numeric_tokens, scan_rendering

DAY = 86400.0
MIN = 60.0
T0 = 1_741_000_000.0 - (1_741_000_000.0 % DAY)
HR = "VitalSign.heart_rate"


def vital(schema, t, **fields):
    ev = validate_event(schema, {"ts": t, **fields}, "VitalSign")
    return ProfileEvent(ev, Provenance("dev-1", "1.0", "periodic", t, t + 5, 330))


def hr_store(schema, values, start=T0, step=MIN):
    store = ProfileStore("s", schema)
    store.ingest_many(vital(schema, start + i * step, heart_rate=v) for i, v in enumerate(values))
    return store


def test_ingest_idempotent(schema):
    store = ProfileStore("s", schema)
    e = vital(schema, T0, heart_rate=70)
    assert store.ingest_event(e) == e.id and len(store) == 1
    store.ingest_event(e)
    assert len(store) == 1 and len(store.series(HR)[0]) == 1


def test_ingest_rejects_invalid(schema):
    from carecircle.ontology import TypedEvent
    bad = ProfileEvent(TypedEvent("VitalSign", 1, {"heart_rate": 70}), Provenance("d", "1", "p", 0, 0, 0))
    with pytest.raises(ValidationError):
        ProfileStore("s", schema).ingest_event(bad)


def test_same_content_same_id(schema):
    assert vital(schema, T0, heart_rate=70).id == vital(schema, T0, heart_rate=70).id
    assert vital(schema, T0, heart_rate=70).id != vital(schema, T0, heart_rate=71).id


def test_constant_hr(schema):
    store = hr_store(schema, [72] * 30)
    fs = enrich_features(store, TimeWindow(T0, T0 + DAY))
    assert fs[HR].mean == 72 and fs.hrv_rmssd == 0.0


def test_rmssd_alternating(schema):
    store = hr_store(schema, [60, 62] * 20)
    fs = enrich_features(store, TimeWindow(T0, T0 + DAY))
    expected = 60000 / 60 - 60000 / 62
    assert fs.hrv_rmssd == pytest.approx(expected, abs=1e-9)
    assert round(fs.hrv_rmssd, 2) == 32.26


def test_missing_fraction_exact(schema):
    rng = np.random.default_rng(0)
    keep = np.sort(rng.choice(1000, 880, replace=False))
    store = ProfileStore("s", schema)
    store.ingest_many(vital(schema, T0 + k * MIN, heart_rate=70) for k in keep)
    store.set_cadence(HR, PeriodicCadence(MIN))
    fs = enrich_features(store, TimeWindow(T0, T0 + 1000 * MIN))
    assert fs[HR].missing_fraction == pytest.approx(0.12, abs=1e-12)
    assert fs.missing_fraction == pytest.approx(0.12, abs=1e-12)


def test_cadences():
    w = TimeWindow(0, 3600)
    assert PeriodicCadence(60).expected(w) == 60
    assert PeriodicCadence(60, 30).expected(w) == 60
    assert ScheduleCadence(((0, 10, 60), (1800, 100, 60))).expected(w) == 40


def test_baseline_constant_and_step(schema):
    store = ProfileStore("s", schema)
    days = [70.0] * 14 + [80.0]
    store.ingest_many(vital(schema, T0 + d * DAY + h * 3600, heart_rate=v)
                      for d, v in enumerate(days) for h in range(8, 12))
    before = TimeWindow(T0 + 13 * DAY, T0 + 14 * DAY)
    after = TimeWindow(T0 + 14 * DAY, T0 + 15 * DAY)
    assert enrich_features(store, before)[HR].delta == 0
    assert enrich_features(store, after)[HR].delta == pytest.approx(10.0)
    b = compute_baseline(store, HR, after.start)
    assert b.sufficient and b.value == 70 and b.mad == 0 and b.n_days == 14


def test_insufficient_history(schema):
    store = ProfileStore("s", schema)
    store.ingest_many(vital(schema, T0 + d * DAY, heart_rate=70) for d in range(3))
    b = compute_baseline(store, HR, T0 + 3 * DAY)
    assert not b.sufficient and b.flag == "insufficient_history"
    assert compute_delta(75.0, b) is None
    f = enrich_features(store, TimeWindow(T0 + 2 * DAY, T0 + 3 * DAY))[HR]
    assert f.delta is None and f.note == "insufficient_history"


def test_derived_features():
    assert sleep_score(480, 100) == 100
    assert sleep_score(240, 50) == pytest.approx(50.0)
    assert [activity_class(x) for x in (0, 249.9, 250, 999, 1000, 2999, 3000)] == [
        "sedentary", "sedentary", "light", "light", "moderate", "moderate", "vigorous"]


def test_sleep_and_activity_enrichment(schema):
    store = ProfileStore("s", schema)
    store.ingest_many([vital(schema, T0 + 3600, sleep_duration=480, sleep_efficiency=90),
                       vital(schema, T0 + 7200, steps=1200), vital(schema, T0 + 10800, steps=1400)])
    fs = enrich_features(store, TimeWindow(T0, T0 + DAY))
    assert fs.sleep_score == pytest.approx(96.0)
    assert fs.activity_class == "moderate"


def test_enrichment_deterministic(small_world):
    store = next(iter(small_world.stores.values()))
    w = small_world.window
    a = enrich_features(store, w).to_bytes()
    store._cache.clear()
    assert enrich_features(store, w).to_bytes() == a


def test_traceability(small_world):
    w = small_world.window
    for store in small_world.stores.values():
        fs = enrich_features(store, w)
        for f in fs.features.values():
            assert f.source_ids and set(f.source_ids) <= set(store.events)
        snap = build_snapshot(store, store.schema.paths(), window=w)
        assert snap.source_ids() <= set(store.events)


def test_aggregates_brute_force(small_world):
    rng = np.random.default_rng(5)
    store = next(iter(small_world.stores.values()))
    w = small_world.window
    metrics = ["VitalSign.heart_rate", "VitalSign.steps", "VitalSign.systolic_bp", "VitalSign.sleep_duration"]
    for _ in range(100):
        a, b = np.sort(rng.uniform(w.start, w.end, 2))
        win = TimeWindow(float(a), float(b) + 1.0)
        fs = enrich_features(store, win)
        for path in metrics:
            name = path.split(".")[1]
            raw = [e.event.fields[name].value for e in store.events.values()
                   if name in e.event.fields and win.contains(e.ts)]
            f = fs.get(path)
            if not raw:
                assert f is None
                continue
            assert f.count == len(raw)
            assert f.mean == pytest.approx(np.mean(raw), rel=1e-12)
            assert (f.min, f.max) == (min(raw), max(raw))


def test_empty_snapshot(small_world):
    store = next(iter(small_world.stores.values()))
    snap = build_snapshot(store, [], window=small_world.window)
    assert snap.fields == frozenset() and snap.text == NO_SHARED_DATA


def test_subject_snapshot_within_budget(small_world):
    store = next(iter(small_world.stores.values()))
    w = small_world.window
    snap = build_snapshot(store, store.schema.paths(), window=w)
    assert snap.fields == set(enrich_features(store, w).features)
    assert token_count(snap.text) <= 1200 and not snap.dropped


def test_budget_drops_lowest_salience(small_world):
    store = next(iter(small_world.stores.values()))
    snap = build_snapshot(store, store.schema.paths(), window=small_world.window, token_budget=40)
    assert token_count(snap.text) <= 40 and snap.dropped
    assert not (snap.fields & set(snap.dropped))


def test_nudge_snapshot_scan(small_world, schema):
    store = next(iter(small_world.stores.values()))
    nudge = load_role_templates(schema)[Role.NUDGE_ONLY]
    snap = build_snapshot(store, nudge, window=small_world.window)
    scanned = scan_rendering(snap.text)
    assert set(scanned) <= set(nudge) and len(scanned) == 3
    assert all(lvl <= AccessLevel.STATUS_FLAG for lvl in scanned.values())
    assert all(not numeric_tokens(line) for line in snap.text.splitlines()[1:])


def test_chat_context_only_hints(small_world):
    store = next(iter(small_world.stores.values()))
    chat = [("user", "how was her sleep and what about the secret diagnosis xyzzy")]
    snap = build_snapshot(store, ["VitalSign.sleep_duration", HR], chat, window=small_world.window)
    assert snap.topic_hints == ("VitalSign.sleep_duration",)
    assert "xyzzy" not in snap.text


LEVELS = [AccessLevel.STATUS_FLAG, AccessLevel.AGGREGATE, AccessLevel.FULL]


@given(st.data())
@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
def test_snapshot_privacy(small_world, data):
    stores = sorted(small_world.stores)
    store = small_world.stores[data.draw(st.sampled_from(stores))]
    paths = store.schema.paths()
    allowed = data.draw(st.dictionaries(st.sampled_from(paths), st.sampled_from(LEVELS), max_size=12))
    budget = data.draw(st.sampled_from([30, 200, 1200]))
    snap = build_snapshot(store, allowed, window=small_world.window, token_budget=budget)
    assert snap.fields <= set(allowed)
    for path, lvl in scan_rendering(snap.text).items():
        assert path in allowed and lvl <= allowed[path]
