from __future__ import annotations

import json

import numpy as np
import pytest

from carecircle.caregraph import AccessLevel
from carecircle.simbench import (
    ConfigError, CorpusError, EvalReport, SimConfig, SyntheticCorpus, binomial_interval, build_world, calibration,
    corpus_digest, generate_circle, generate_corpus, inject_misconfig, load_config, load_corpus, render_tables,
    run_compat_eval, run_exposure_eval, run_fidelity_eval, run_misconfig_eval, write_corpus,
)
from carecircle.simbench.cli import REPORT_NAME, _exposure_templates, main


# -- config and corpus -------------------------------------------------------------

def test_packaged_config_round_trips():
    cfg = load_config()
    assert SimConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    assert cfg.with_overrides(seed=cfg.seed).hash == cfg.hash
    assert cfg.with_overrides(seed=cfg.seed + 1).hash != cfg.hash


@pytest.mark.parametrize("bad", [
    {"n_circles": 0},
    {"missingness_mean": 1.5},
    {"circle_size_pmf": {"3": 0.5, "4": 0.4}},
    {"circle_size_pmf": {"1": 1.0}},
    {"outliers_mean": -1.0},
    {"no_such_key": 1},
])
def test_infeasible_config(bad):
    with pytest.raises((ConfigError, TypeError)):
        SimConfig.from_json({**SimConfig().to_json(), **bad})


def test_bad_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_zero_missingness_means_no_gaps():
    cfg = SimConfig(n_circles=3, seed=2, missingness_mean=0.0, outliers_mean=0.0)
    corpus = generate_corpus(cfg)
    for c in corpus.circles:
        st = corpus.streams[c.id]
        assert st.labels["gaps"] == [] and st.labels["missing_slots"] == 0 and st.labels["outliers"] == []
        assert st.sample_count() == st.labels["scheduled_slots"] == cfg.samples_per_subject


def test_circles_are_independent_of_corpus_size():
    cfg = SimConfig(n_circles=5, seed=9)
    corpus = generate_corpus(cfg)
    spec, stream = generate_circle(cfg.with_overrides(n_circles=1), 3)
    assert spec == corpus.circles[3]
    assert np.array_equal(stream.sensors["heart_rate"][1], corpus.streams[spec.id].sensors["heart_rate"][1])


def test_covariates_shift_baselines():
    corpus = generate_corpus(SimConfig(n_circles=80, seed=4))
    htn, other = [], []
    for c in corpus.circles:
        sys_ = corpus.streams[c.id].sensors["bp"][1][:, 0].mean()
        (htn if "hypertension" in c.covariates["comorbidities"] else other).append(sys_)
    assert np.mean(htn) - np.mean(other) > 8.0


def test_gen_is_deterministic(tmp_path):
    cfg = SimConfig(n_circles=4, seed=21)
    a = write_corpus(generate_corpus(cfg), tmp_path / "a")
    b = write_corpus(generate_corpus(cfg), tmp_path / "b")
    assert corpus_digest(a) == corpus_digest(b)
    c = write_corpus(generate_corpus(cfg.with_overrides(seed=22)), tmp_path / "c")
    assert corpus_digest(c) != corpus_digest(a)


def test_corpus_round_trip_and_tamper(tmp_path):
    corpus = generate_corpus(SimConfig(n_circles=2, seed=5))
    path = write_corpus(corpus, tmp_path / "c")
    back = load_corpus(path)
    assert back.circles == corpus.circles and back.config == corpus.config
    for cid, st in corpus.streams.items():
        for sig, (ts, vals) in st.sensors.items():
            assert np.array_equal(back.streams[cid].sensors[sig][0], ts)
            assert np.array_equal(back.streams[cid].sensors[sig][1], vals)
    f = path / "events" / f"{corpus.circles[0].id}.jsonl"
    f.write_text(f.read_text() + "\n")
    with pytest.raises(CorpusError):
        load_corpus(path)
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "nothing")


def test_small_calibration_shape(small_corpus):
    cal = calibration(small_corpus)
    assert cal["n_circles"] == 6
    assert cal["samples_per_subject_mean"] == small_corpus.config.samples_per_subject
    assert 0.0 <= cal["missingness_mean"] <= 1.0


# -- exposure and misconfiguration ---------------------------------------------------

def test_clean_exposure(small_world):
    ex = run_exposure_eval(small_world)
    assert ex["leak_count"] == 0 and ex["leaks"] == [] and ex["withheld"] == []
    expected = {"care_primary": 15, "family_monitor": 7, "nudge_only": 3}
    for role, r in ex["roles"].items():
        assert r["expected"] == r["exposed"]
        if role in expected:
            assert r["expected"] == expected[role]
        assert r["leak_rate"] == 0.0
    assert ex["briefings"] == sum(len(c.members) for c in small_world.corpus.circles)


def test_one_injected_field_is_reported(small_corpus, small_world):
    mutated = _exposure_templates(small_world, 1, seed=3)
    diff = [(role, p) for role in mutated for p in mutated[role]
            if AccessLevel.parse(mutated[role][p]) != small_world.reference[role].get(p, AccessLevel.NONE)]
    assert len(diff) == 1
    role, path = diff[0]
    probe = build_world(small_corpus, role_templates=mutated, stores=small_world.stores, index_evidence=False)
    try:
        ex = run_exposure_eval(probe)
    finally:
        probe.close()
    assert ex["leak_count"] >= 1
    hits = [l for l in ex["leaks"] if l["field"] == path and l["role"] == role.value]
    assert hits
    members = {(c.id, a) for c in small_corpus.circles for a, r in c.members if r == role.value}
    for l in hits:
        assert (l["circle"], l["actor"]) in members and l["briefing"].startswith("br-")
    assert {(l["field"], l["role"]) for l in ex["leaks"]} == {(path, role.value)}
    assert EvalReport({"seed": 0}, exposure=ex).failures()


def test_no_observers_is_a_vacuous_pass(small_corpus):
    empty = SyntheticCorpus(small_corpus.config, [], {})
    world = build_world(empty)
    try:
        ex = run_exposure_eval(world)
    finally:
        world.close()
    assert ex["briefings"] == 0 and ex["leak_count"] == 0 and ex["roles"] == {}
    assert EvalReport({"seed": 0}, exposure=ex).failures() == []


def test_misconfig_detects_every_injection(small_world):
    m = run_misconfig_eval(small_world, n_injections=4, n_runs=24, seed=1, n_controls=4)
    assert m["detected"] == 4 and m["missed"] == [] and m["false_alarms"] == 0
    for inj in m["injections"]:
        assert inj["kind"] in ("add", "over_level")
        assert any(l["field"] == inj["field"] for l in inj["leaks"])


def test_zero_injections_zero_detections(small_world):
    m = run_misconfig_eval(small_world, n_injections=0, n_runs=12, seed=2, n_controls=0)
    assert m["detected"] == 0 and m["false_alarms"] == 0 and m["injections"] == []


def test_label_renames_stay_silent(small_world):
    m = run_misconfig_eval(small_world, n_injections=0, n_runs=12, seed=3, n_controls=12)
    assert len(m["controls_manifest"]) == 12
    assert all(c["kind"] == "rename_label" for c in m["controls_manifest"])
    assert m["control_alarms"] == 0 and m["false_alarms"] == 0


def test_injection_plan_bounds(small_world):
    with pytest.raises(ValueError):
        inject_misconfig(small_world, 13, 0, n_runs=12)
    with pytest.raises(ValueError):
        inject_misconfig(small_world, 10, 0, n_runs=12, n_controls=3)
    plans = inject_misconfig(small_world, 3, 0, n_runs=12, n_controls=2)
    assert sum(p.injection is not None for p in plans) == 3
    assert sum(p.control is not None for p in plans) == 2
    assert plans == inject_misconfig(small_world, 3, 0, n_runs=12, n_controls=2)


# -- fidelity --------------------------------------------------------------------------

@pytest.fixture()
def fresh_world(small_corpus, small_world):
    world = build_world(small_corpus, stores=small_world.stores)
    yield world
    world.close()


def test_fault_free_fidelity_is_exact(fresh_world):
    f = run_fidelity_eval(fresh_world, n_turns=120, r=0.0, q=0.0, seed=1)
    assert f["statements"] > 0
    assert f["precision"] == f["recall"] == f["provenance_accuracy"] == 1.0
    assert f["brute_force"]["agrees"] and f["fallbacks"] == 0


def test_corruption_confusion_matches_manifest(fresh_world):
    f = run_fidelity_eval(fresh_world, n_turns=150, r=0.0, q=0.1, seed=4)
    conf = f["confusion"]
    n_corrupted = sum(conf["corrupted"].values())
    assert n_corrupted > 0
    assert conf["corrupted"] == {"supported": 0, "unsupported": n_corrupted, "unverifiable": 0}
    assert conf["faithful"]["unsupported"] == conf["faithful"]["unverifiable"] == 0
    assert f["statements"] - f["correct"] == n_corrupted
    assert f["brute_force"]["agrees"]


def test_fabrication_lowers_precision_and_provenance(fresh_world):
    f = run_fidelity_eval(fresh_world, n_turns=150, r=0.2, q=0.0, seed=6)
    assert f["precision"] < 1.0 and f["provenance_accuracy"] < 1.0
    assert f["brute_force"]["agrees"]
    lo, hi = f["precision_ci95"]
    assert lo <= f["expected_precision"] <= hi


def test_binomial_interval():
    lo, hi = binomial_interval(10000, 0.94)
    assert lo < 0.94 < hi and hi - lo < 0.02
    assert binomial_interval(0, 0.5) == (0.0, 1.0)
    assert binomial_interval(100, 1.0) == (1.0, 1.0)


# -- compat and report --------------------------------------------------------------

def test_compat_section():
    c = run_compat_eval()
    v = c["vendors"]
    assert v["healthconnect"]["pass_rate"] == 1.0
    assert v["bandcloud"]["pass_rate"] == 0.875
    assert all(x.get("arithmetic_ok") for x in v.values() if not x.get("skipped"))
    assert run_compat_eval() == c


def test_report_round_trip(small_world):
    rep = EvalReport({"seed": 1, "config_hash": "x"}, exposure=run_exposure_eval(small_world),
                     compat=run_compat_eval())
    back = EvalReport.from_json(json.loads(rep.dumps()))
    assert back.dumps() == rep.dumps()
    text = render_tables(rep)
    assert "Exposure control" in text and "Care Primary" in text and "Result: PASS" in text
    with pytest.raises(ValueError):
        EvalReport.from_json({"format": 99})


# -- CLI ----------------------------------------------------------------------------------

def test_cli_gen_twice_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen", "--seed", "7", "--circles", "3", "--out", str(tmp_path / name)]) == 0
    assert corpus_digest(tmp_path / "a") == corpus_digest(tmp_path / "b")


def test_cli_clean_exposure_exits_zero(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["eval", "--suite", "exposure", "--circles", "4", "--seed", "3", "--out", str(out)]) == 0
    rep = json.loads((out / REPORT_NAME).read_text())
    assert rep["exposure"]["leak_count"] == 0 and rep["failures"] == []
    assert "Result: PASS" in capsys.readouterr().out
    assert main(["report", str(out)]) == 0
    assert main(["verify-chain", str(out / "audit")]) == 0


def test_cli_injected_leak_exits_one(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["eval", "--suite", "exposure", "--circles", "4", "--seed", "3", "--inject", "1",
                 "--out", str(out)]) == 1
    rep = json.loads((out / REPORT_NAME).read_text())
    assert rep["exposure"]["leak_count"] >= 1 and rep["failures"]
    assert main(["report", str(out / REPORT_NAME)]) == 1


def test_cli_verify_chain_detects_tamper(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["eval", "--suite", "exposure", "--circles", "2", "--seed", "3", "--out", str(out)]) == 0
    chain = sorted(p for p in (out / "audit").iterdir() if p.suffix == ".jsonl")[0]
    lines = chain.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["payload"]["access_level"] = "full" if rec["payload"]["access_level"] != "full" else "aggregate"
    lines[0] = json.dumps(rec)
    chain.write_text("\n".join(lines) + "\n")
    assert main(["verify-chain", str(out / "audit")]) == 1
    assert "TAMPERED at seq 0" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["gen"],
    ["eval", "--suite", "nope"],
    ["eval", "--fabrication-rate", "2"],
    ["eval", "--turns", "-1"],
    ["report", "/nonexistent/report.json"],
    ["verify-chain", "/nonexistent"],
    ["gen", "--config", "/nonexistent.json", "--out", "/tmp/x"],
])
def test_cli_usage_errors_exit_two(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().err


def test_cli_corpus_conflicts_with_seed(tmp_path, capsys):
    assert main(["gen", "--circles", "2", "--out", str(tmp_path / "c")]) == 0
    assert main(["eval", "--corpus", str(tmp_path / "c"), "--seed", "1", "--suite", "compat"]) == 2
