import json
import shutil

import pytest

from conftest import FIXTURES, write_config
from regpilot.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def last_error(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture
def boston_cfg(tmp_path, capsys):
    cfg = write_config(tmp_path, "boston")
    assert run(capsys, "index", "--config", str(cfg))[0] == 0
    return cfg


def test_ingest_summarizes_tiers(tmp_path, capsys):
    code, out, err = run(capsys, "ingest", "--config", str(write_config(tmp_path, "boston")))
    assert code == 0
    summary = json.loads(out)
    assert summary["documents"] == 6
    assert all(summary["by_tier"][t] >= 1 for t in
               ["state_law", "state_manual", "city_regulation", "court_case", "traffic_norm"])
    assert summary["figures"] >= 4
    assert json.loads(err.splitlines()[0])["event"] == "config"


def test_index_then_rebuild_hits_cache(boston_cfg, capsys):
    code, out, _ = run(capsys, "index", "--config", str(boston_cfg))
    info = json.loads(out)
    assert code == 0 and info["backend_calls"] == 0 and info["backend_id"] == "local-fnv1a-256"


def test_retrieve_prints_scored_sentences(boston_cfg, capsys):
    code, out, _ = run(capsys, "retrieve", "--config", str(boston_cfg),
                       "turn right on red after stopping")
    result = json.loads(out)
    assert code == 0 and 0 < len(result["sentences"]) <= 5


@pytest.mark.parametrize("name, selected", [
    ("clear_crosswalk", ["forward_current", "forward_decel"]),
    ("occupied_crosswalk", ["forward_decel"]),
    ("right_on_red_pedestrian", ["turn_right_decel"]),
    ("right_on_red_boston", ["turn_right_current", "turn_right_decel"]),
])
def test_decide_boston_fixtures(boston_cfg, capsys, name, selected):
    code, out, _ = run(capsys, "decide", "--config", str(boston_cfg),
                       str(FIXTURES / "scenarios" / f"{name}.json"), "--request-id", "cli-1")
    assert code == 0
    decision = json.loads(out)
    assert decision["selected_actions"] == selected
    assert decision["request_id"] == "cli-1"


def test_decide_singapore_selects_nothing(tmp_path, capsys):
    cfg = write_config(tmp_path, "singapore")
    run(capsys, "index", "--config", str(cfg))
    code, out, _ = run(capsys, "decide", "--config", str(cfg),
                       str(FIXTURES / "scenarios" / "right_on_red_singapore.json"))
    decision = json.loads(out)
    assert code == 0 and decision["selected_actions"] == []
    assert all(not v["compliant"] and not v["safe"] for v in decision["verdicts"])
    kinds = {r["sent_id"]: r["kind"] for r in decision["applicable_rules"]}
    assert kinds["sg-rtr-1-1-3"] == "mandatory"  # no right turn on red


def test_decide_terse_and_baseline(boston_cfg, capsys):
    scen = str(FIXTURES / "scenarios" / "clear_crosswalk.json")
    _, out, _ = run(capsys, "decide", "--config", str(boston_cfg), scen, "--verbosity", "terse")
    assert all(isinstance(s, str) for s in json.loads(out)["retrieved"])
    code, out, _ = run(capsys, "decide", "--config", str(boston_cfg), scen, "--mode", "baseline")
    decision = json.loads(out)
    assert code == 0 and decision["mode"] == "baseline" and decision["retrieved"] == []
    assert len(decision["selected_actions"]) == 5


def test_missing_corpus_dir_exit_one_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    cfg = write_config(tmp_path, "boston", corpus_dir=str(missing))
    code, _, err = run(capsys, "index", "--config", str(cfg))
    assert code == 1
    error = last_error(err)
    assert error["error"] == "config_error" and str(missing) in error["message"]


def test_missing_index_is_input_error(tmp_path, capsys):
    cfg = write_config(tmp_path, "boston")
    code, _, err = run(capsys, "decide", "--config", str(cfg),
                       str(FIXTURES / "scenarios" / "clear_crosswalk.json"))
    assert code == 1 and "index" in last_error(err)["message"]


def test_region_mismatch_rejected(boston_cfg, capsys):
    code, _, err = run(capsys, "decide", "--config", str(boston_cfg),
                       str(FIXTURES / "scenarios" / "right_on_red_singapore.json"))
    assert code == 1 and "region" in last_error(err)["message"]


def test_stale_index_exit_three(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    shutil.copytree(FIXTURES / "corpora" / "boston", corpus)
    cfg = write_config(tmp_path, "boston", corpus_dir=str(corpus))
    run(capsys, "index", "--config", str(cfg))
    doc = corpus / "us-traffic-norms.md"
    doc.write_text(doc.read_text() + "\nDrivers wave each other through at quiet junctions.\n")
    code, _, err = run(capsys, "decide", "--config", str(cfg),
                       str(FIXTURES / "scenarios" / "clear_crosswalk.json"))
    assert code == 3 and last_error(err)["error"] == "stale_index"


def test_fixture_miss_exit_two(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    cfg = write_config(tmp_path, "boston", backends={
        "embed_stage1": {"kind": "local_embed"},
        "chat_reasoning": {"kind": "scripted_chat", "fixture_path": str(empty)}})
    run(capsys, "index", "--config", str(cfg))
    code, _, err = run(capsys, "decide", "--config", str(cfg),
                       str(FIXTURES / "scenarios" / "clear_crosswalk.json"))
    assert code == 2 and last_error(err)["error"] == "fixture_miss"


def test_bench_writes_report_and_honours_floor(boston_cfg, tmp_path, capsys):
    suite = str(FIXTURES / "suites" / "hypothesized.json")
    code, out, _ = run(capsys, "bench", "--config", str(boston_cfg), suite,
                       "--report-dir", str(tmp_path / "rep"), "--floor", "0.9")
    assert code == 0 and "| decisions correct | 10/10 | 0/10 |" in out
    data = json.loads((tmp_path / "rep" / "hypothesized.json").read_text())
    assert data["modes"]["with_trr"]["pair_accuracy"] == 1.0
    code, _, err = run(capsys, "bench", "--config", str(boston_cfg), suite, "--floor", "1.01")
    assert code == 4 and "below_floor" in err


def test_bad_config_and_bad_scenario(tmp_path, capsys):
    bad = tmp_path / "c.toml"
    bad.write_text("region = [")
    assert run(capsys, "ingest", "--config", str(bad))[0] == 1
    cfg = write_config(tmp_path, "boston")
    run(capsys, "index", "--config", str(cfg))
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"case_id": "x", "region": "boston", "environment_text": "Road.",
                                "ego_state_text": "stopped"}))
    code, _, err = run(capsys, "decide", "--config", str(cfg), str(scen))
    assert code == 1 and last_error(err)["field"] == "intent"
