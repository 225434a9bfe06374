"""The ten acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (visible with ``pytest -s`` or in
``scripts/run_acceptance.py``) and then asserts.
"""
from __future__ import annotations

import json
import random
import time
from dataclasses import replace

import numpy as np
import pytest

from carecircle.caregraph import AccessLevel
from carecircle.connectors import ProfileEvent, Provenance, align_session
from carecircle.ontology import load_default_ontology, validate_event
from carecircle.pipeline import Claim, verify_claim
from carecircle.profile import ProfileStore, TimeWindow, build_snapshot
from carecircle.retrieval import DIM, KINDS, VectorIndex
from carecircle.simbench import (
    SimConfig, build_world, calibration, generate_corpus, load_config, run_compat_eval, run_fidelity_eval,
    run_misconfig_eval,
)
from carecircle.simbench.cli import REPORT_NAME, main
from carecircle.simbench.corpus import corpus_digest
from carecircle.vault.audit import AuditChain, AuditRecord, payload_hash, verify_chain
from carecircle.vault.crypto import (
    AuthenticationError, KeyDestroyedError, KeyRing, SealedStore, rotate_keys, seal, unseal,
)

HR = "VitalSign.heart_rate"
STEPS = "VitalSign.steps"
DAY = 86400.0


@pytest.fixture()
def verdict(capsys):
    def report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def corpus50():
    return generate_corpus(load_config())


@pytest.fixture(scope="module")
def world50(corpus50):
    world = build_world(corpus50)
    yield world
    world.close()


def test_1_exposure_control(tmp_path, verdict, capsys):
    t0 = time.perf_counter()
    code = main(["eval", "--suite", "exposure", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    rep = json.loads((tmp_path / REPORT_NAME).read_text())
    ex = rep["exposure"]
    roles = ex["roles"]
    canonical = {"care_primary": 15, "family_monitor": 7, "nudge_only": 3}
    ok = (code == 0 and rep["meta"]["n_circles"] == 50 and ex["leak_count"] == 0
          and all(r["expected"] == r["exposed"] for r in roles.values())
          and all(roles[k]["expected"] == v and roles[k]["exposed"] == v for k, v in canonical.items())
          and elapsed <= 60.0)
    shown = ", ".join(f"{k} {roles[k]['expected']}->{roles[k]['exposed']}" for k in canonical)
    verdict(1, ok, f"{shown}; leaks {ex['leak_count']}; {elapsed:.1f}s (limit 60s)")


def test_2_misconfig_detection(world50, verdict):
    m = run_misconfig_eval(world50, n_injections=12, n_runs=120, seed=world50.corpus.config.seed, n_controls=6)
    ok = m["detected"] == 12 and m["injected"] == 12 and m["false_alarms"] == 0 and m["clean_runs"] == 108
    verdict(2, ok, f"{m['detected']}/{m['injected']} detected, {m['false_alarms']}/{m['clean_runs']} false alarms "
                   f"({m['controls']} rename controls)")


@pytest.mark.slow
def test_3_fidelity_measurement(corpus50, world50, verdict):
    t0 = time.perf_counter()
    fresh = build_world(corpus50, stores=world50.stores)
    try:
        f = run_fidelity_eval(fresh, n_turns=10000, r=0.06, q=0.0, seed=7)
    finally:
        fresh.close()
    clean_world = build_world(corpus50, stores=world50.stores)
    try:
        c = run_fidelity_eval(clean_world, n_turns=1000, r=0.0, q=0.0, seed=7)
    finally:
        clean_world.close()
    elapsed = time.perf_counter() - t0
    lo, hi = f["precision_ci95"]
    conf = f["confusion"]
    ok = (lo <= f["precision"] <= hi and f["brute_force"]["agrees"] and f["expected_precision"] == pytest.approx(0.94)
          and conf["corrupted"]["supported"] == 0 and conf["faithful"]["unsupported"] == 0
          and c["precision"] == 1.0 and c["recall"] == 1.0 and c["provenance_accuracy"] == 1.0
          and elapsed <= 300.0)
    verdict(3, ok, f"r=0.06 precision {f['precision']:.4f} in [{lo:.4f}, {hi:.4f}] over {f['statements']} "
                   f"statements; r=0 P/R/prov {c['precision']}/{c['recall']}/{c['provenance_accuracy']}; "
                   f"{elapsed:.0f}s (limit 300s)")


# criterion 4: truth table written out by hand, one row per access level
_NV, _IN = "field not visible", "insufficient access level"
TRUTH = {
    AccessLevel.NONE: {"match": ("unverifiable", _NV), "conflict": ("unverifiable", _NV),
                       "invisible": ("unverifiable", _NV)},
    AccessLevel.STATUS_FLAG: {"match": ("unverifiable", _IN), "conflict": ("unverifiable", _IN),
                              "invisible": ("unverifiable", _NV)},
    AccessLevel.AGGREGATE: {"match": ("supported", None), "conflict": ("unsupported", None),
                            "invisible": ("unverifiable", _NV)},
    AccessLevel.FULL: {"match": ("supported", None), "conflict": ("unsupported", None),
                       "invisible": ("unverifiable", _NV)},
}


def _grid_store(schema):
    store = ProfileStore("s", schema)
    for i in range(60):
        t = i * 60.0
        ev = validate_event(schema, {"ts": t, "heart_rate": 70 + (i % 5), "steps": 10 * i}, "VitalSign")
        store.ingest_event(ProfileEvent(ev, Provenance("d", "1", "periodic", t, t + 1, 0)))
    return store


def test_4_verifier_truth_table(verdict):
    schema = load_default_ontology()
    store = _grid_store(schema)
    window = TimeWindow(0.0, DAY)
    mean = float(np.mean([70 + (i % 5) for i in range(60)]))
    values = {"=": {"match": mean, "conflict": mean + 20},
              "<": {"match": mean + 10, "conflict": mean - 10},
              ">": {"match": mean - 10, "conflict": mean + 10}}
    cells = mismatches = 0
    for level, row in TRUTH.items():
        for relation in ("=", "<", ">"):
            for case, (status, reason) in row.items():
                allowed = {STEPS: level} if case == "invisible" else {HR: level}
                snap = build_snapshot(store, allowed, window=window)
                value = values[relation]["match" if case == "invisible" else case]
                v = verify_claim(Claim("c", HR, relation, value, "bpm", "mean", (0.0, DAY)), [], snap)
                cells += 1
                if v.status != status or (reason is not None and v.reason != reason):
                    mismatches += 1
    verdict(4, cells == 36 and mismatches == 0, f"{cells - mismatches}/{cells} grid cells match the truth table")


def _oracle_top_k(vectors, ids, updated, query, k):
    sims = np.clip(vectors @ query, -1.0, 1.0)
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], -updated[i], ids[i]))
    return [ids[i] for i in order[:k]]


def test_5_retrieval_exactness(verdict):
    mismatches = queries = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        idx = VectorIndex()
        ids, vecs, upd = [], [], []
        for i in range(1000):
            v = rng.normal(size=DIM) if i % 9 else (vecs[-1] if vecs else rng.normal(size=DIM))
            v = v / np.linalg.norm(v)
            u = float(rng.integers(0, 30))
            idx.upsert_vector(f"it-{seed}-{i:04d}", v, sorted(KINDS)[i % len(KINDS)], updated_at=u)
            ids.append(f"it-{seed}-{i:04d}")
            vecs.append(v)
            upd.append(u)
        mat = np.array(vecs)
        for _ in range(50):
            q = rng.normal(size=DIM)
            q /= np.linalg.norm(q)
            k = int(rng.integers(1, 20))
            queries += 1
            if idx.retrieve_top_k(q, k).ids != _oracle_top_k(mat, ids, upd, q, k):
                mismatches += 1
    verdict(5, queries == 500 and mismatches == 0, f"{queries} queries over 10 seeds x 1000 items, "
                                                   f"{mismatches} mismatches")


def test_6_timestamp_alignment(verdict):
    skews = (0, 1, -1, 45, -45, 300, -300, 3600, -3600, 6 * 3600, -6 * 3600, 86000, -86000)
    tzs = (0, 330, -330, 345, 540, -480, 840, -720)
    worst = 0.0
    failed = []
    for skew in skews:
        for tz in tzs:
            rng = np.random.default_rng([abs(skew), abs(tz), skew < 0, tz < 0])
            true = 1_741_000_000.0 + np.sort(rng.uniform(0, DAY, 20))
            latency = rng.exponential(0.3, 20)
            out = align_session((true + tz * 60 + skew).tolist(), (true + latency).tolist(), tz)
            err = float(np.abs(np.array([a.canonical_ts for a in out]) - true).max())
            worst = max(worst, err)
            if err > 1.0 or any(a.quarantined for a in out):
                failed.append((skew, tz))
    n = len(skews) * len(tzs)
    verdict(6, not failed, f"{n - len(failed)}/{n} skew x offset grid points within 1 s (worst {worst:.3f} s)")


def _tamper(records, op, i, j):
    """Apply one tamper operation; return the records and the seq to be flagged."""
    recs = list(records)
    if op == "mutate":
        recs[i] = replace(recs[i], payload={**recs[i].payload, "n": -1})
        return recs, i
    if op == "rewrite":
        p = {**recs[i].payload, "n": -1}
        recs[i] = replace(recs[i], payload=p, payload_hash=payload_hash(p))
        return recs, i + 1
    if op == "delete":
        del recs[i]
        return recs, i
    if op == "insert":
        recs.insert(i, AuditRecord(i, recs[i].prev_hash, payload_hash({}), "ingest", 0.0, {}))
        return recs, i + 1
    lo, hi = min(i, j), max(i, j)
    recs[lo], recs[hi] = recs[hi], recs[lo]
    return recs, lo


def test_7_vault(verdict):
    ring = KeyRing.create("acceptance", salt=b"0123456789abcdef")
    rng = random.Random(7)
    # single-byte mutations over nonce, ciphertext and aad
    mutations = rejected = 0
    for r in range(20):
        rec = seal(f"record {r} ".encode() * 8, ring, f"r{r}")
        for _ in range(50):
            name = rng.choice(["nonce", "ciphertext", "aad"])
            blob = bytearray(getattr(rec, name))
            blob[rng.randrange(len(blob))] ^= rng.randrange(1, 256)
            mutations += 1
            try:
                unseal(replace(rec, **{name: bytes(blob)}), ring)
            except AuthenticationError:
                rejected += 1
    # tamper operations on a chain
    chain = AuditChain()
    for i in range(300):
        chain.append("ingest", {"event_id": f"ev-{i:05d}", "n": i}, float(i))
    tampers = caught = 0
    for _ in range(1000):
        op = rng.choice(["mutate", "rewrite", "delete", "insert", "reorder"])
        i = rng.randrange(len(chain.records) - 1)
        j = rng.choice([x for x in range(len(chain.records)) if x != i])
        recs, expected = _tamper(chain.records, op, i, j)
        v = verify_chain(recs, chain.head)
        tampers += 1
        caught += (not v.ok and v.first_bad_seq == expected)
    # rotation over 1000 records
    ring2 = KeyRing.create("rotate", salt=b"fedcba9876543210")
    store = SealedStore()
    plain = {}
    for i in range(1000):
        rid = f"r{i:04d}"
        plain[rid] = f"value {i}".encode()
        store.put(seal(plain[rid], ring2, rid), flush=False)
    stale = dict(store.records)
    rep = rotate_keys(ring2, store, now=1.0)
    readable = sum(unseal(store.get(rid), ring2) == data and store.records[rid].key_id == rep.new_key_id
                   for rid, data in plain.items())
    old_refused = 0
    for rec in stale.values():
        try:
            unseal(rec, ring2)
        except KeyDestroyedError:
            old_refused += 1
    ok = (rejected == mutations and caught == tampers and rep.complete and readable == 1000
          and old_refused == 1000)
    verdict(7, ok, f"mutations rejected {rejected}/{mutations}; tampers flagged at the right seq {caught}/{tampers}; "
                   f"rotated {readable}/1000 readable under the new key, {old_refused}/1000 old copies refused")


def test_8_compat_replay(verdict):
    a, b = run_compat_eval(), run_compat_eval()
    v = a["vendors"]
    bc, hc = v["bandcloud"], v["healthconnect"]
    ok = (a == b and bc["metrics_synced"] == 14 and bc["metrics_expected"] == 16 and bc["pass_rate"] == 0.875
          and hc["pass_rate"] == 1.0 and all(x["arithmetic_ok"] for x in v.values() if not x.get("skipped")))
    verdict(8, ok, f"bandcloud {bc['metrics_synced']}/{bc['metrics_expected']} = {bc['pass_rate']}; "
                   f"healthconnect {hc['pass_rate']}; deterministic {a == b}")


def test_9_determinism(tmp_path, verdict, capsys):
    digests, reports = [], []
    for run in ("a", "b"):
        corpus_dir = tmp_path / f"corpus-{run}"
        out = tmp_path / f"eval-{run}"
        assert main(["gen", "--seed", "7", "--out", str(corpus_dir)]) == 0
        code = main(["eval", "--corpus", str(corpus_dir), "--turns", "2000", "--out", str(out)])
        assert code == 0
        digests.append(corpus_digest(corpus_dir))
        reports.append((out / REPORT_NAME).read_bytes())
    capsys.readouterr()
    ok = digests[0] == digests[1] and reports[0] == reports[1]
    verdict(9, ok, f"corpus digests equal {digests[0] == digests[1]}, EvalReport bytes equal "
                   f"{reports[0] == reports[1]} ({len(reports[0])} bytes)")


def test_10_distribution_calibration(verdict):
    cal = calibration(generate_corpus(SimConfig(n_circles=1000)))
    q1, q3 = cal["circle_size_iqr"]
    ok = cal["circle_size_median"] == 4 and 3 <= q1 and q3 <= 5 and abs(cal["missingness_mean"] - 0.12) <= 0.02
    verdict(10, ok, f"median {cal['circle_size_median']:g}, IQR {q1:g}-{q3:g}, "
                    f"missingness {cal['missingness_mean']:.4f} (0.12 +/- 0.02)")
