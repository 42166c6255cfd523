import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from regpilot.errors import ScenarioError
from regpilot.harness import load_suite
from regpilot.providers import ScriptedChat
from regpilot.scenario import (ACTION_SPACE, Action, GlobalIntent, Maneuver, QueryOrigin,
                               RetrievalQuery, ScenarioCase, SpeedMode, build_retrieval_query,
                               extract_action_set, load_scenario, scenario_from_dict)


def case_dict(**kw):
    d = {"case_id": "c1", "region": "boston", "environment_text": "Four-way stop.",
         "ego_state_text": "stopped", "intent": "left"}
    d.update(kw)
    return d


def test_action_space_has_eleven_distinct_tokens():
    assert len(ACTION_SPACE) == 11
    assert len({a.token for a in ACTION_SPACE}) == 11
    assert sum(a.speed is None for a in ACTION_SPACE) == 2


def test_action_sets():
    left = extract_action_set(GlobalIntent.LEFT)
    assert [a.token for a in left] == ["turn_left_current", "turn_left_accel", "turn_left_decel"]
    right = extract_action_set(GlobalIntent.RIGHT)
    assert [a.token for a in right] == [t.replace("left", "right") for t in (a.token for a in left)]
    fwd = extract_action_set(GlobalIntent.FORWARD)
    assert [a.token for a in fwd] == ["forward_current", "forward_accel", "forward_decel",
                                      "lane_change_left", "lane_change_right"]
    assert len(extract_action_set(GlobalIntent.FORWARD, include_lane_changes=False)) == 3


@given(st.sampled_from(list(GlobalIntent)), st.booleans())
def test_action_set_cardinality(intent, lanes):
    actions = extract_action_set(intent, lanes)
    assert len(actions) in (3, 5)
    assert set(actions) <= set(ACTION_SPACE)


def test_action_tokens_round_trip_and_validity():
    for a in ACTION_SPACE:
        assert Action.from_token(a.token) == a
    with pytest.raises(ValueError):
        Action(Maneuver.FORWARD)
    with pytest.raises(ValueError):
        Action(Maneuver.LANE_CHANGE_LEFT, SpeedMode.CURRENT)
    with pytest.raises(ScenarioError):
        Action.from_token("reverse_fast")
    assert Action.from_token("turn_left_accel").describe() == "turn left with acceleration"


@pytest.mark.parametrize("field", ["case_id", "region", "environment_text", "intent"])
def test_missing_field_named(field):
    d = case_dict()
    del d[field]
    with pytest.raises(ScenarioError) as info:
        scenario_from_dict(d)
    assert info.value.field == field


def test_empty_environment_and_bad_intent():
    with pytest.raises(ScenarioError) as info:
        scenario_from_dict(case_dict(environment_text="  "))
    assert info.value.field == "environment_text"
    with pytest.raises(ScenarioError) as info:
        scenario_from_dict(case_dict(intent="backwards"))
    assert info.value.field == "intent"
    assert scenario_from_dict(case_dict(intent=" Left ")).intent is GlobalIntent.LEFT


def test_unknown_field_rejected():
    with pytest.raises(ScenarioError) as info:
        scenario_from_dict(case_dict(weather="rain"))
    assert info.value.field == "weather"


def gt(tokens):
    return {t: {"compliant": True, "safe": True} for t in tokens}


def test_ground_truth_must_cover_action_set_exactly():
    ok = scenario_from_dict(case_dict(ground_truth=gt(["turn_left_current", "turn_left_accel", "turn_left_decel"])))
    assert len(ok.ground_truth) == 3
    with pytest.raises(ScenarioError):
        scenario_from_dict(case_dict(ground_truth=gt(["turn_left_current", "turn_left_accel"])))
    with pytest.raises(ScenarioError):
        scenario_from_dict(case_dict(ground_truth=gt(["turn_left_current", "turn_left_accel", "turn_left_decel", "forward_current"])))
    with pytest.raises(ScenarioError):
        scenario_from_dict(case_dict(ground_truth={"turn_left_current": {"compliant": "yes", "safe": True}}))


def test_ground_truth_depends_on_lane_change_flag():
    fwd = gt(["forward_current", "forward_accel", "forward_decel"])
    with pytest.raises(ScenarioError):
        scenario_from_dict(case_dict(intent="forward", ground_truth=fwd))
    assert scenario_from_dict(case_dict(intent="forward", ground_truth=fwd), include_lane_changes=False)


def test_shipped_ground_truth_uses_the_extracted_action_sets(fixtures_dir):
    files = list((fixtures_dir / "scenarios").glob("*.json"))
    assert len(files) == 5
    for path in files:
        c = load_scenario(path)
        assert set(c.ground_truth) == set(c.action_set())
    for path in (fixtures_dir / "suites").glob("*.json"):
        for c in load_suite(path).cases:
            assert set(c.ground_truth) == set(extract_action_set(c.intent))


def test_to_dict_round_trip(fixtures_dir):
    c = load_scenario(fixtures_dir / "scenarios" / "occupied_crosswalk.json")
    assert scenario_from_dict(json.loads(json.dumps(c.to_dict()))) == c
    assert [a.token for a in c.expected_selection()] == ["forward_decel"]


def test_load_scenario_errors(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(bad)


# -- retrieval query ------------------------------------------------------------------

def minimal_case():
    return ScenarioCase("c", "boston", "Four-way stop.", "stopped", GlobalIntent.LEFT)


def test_template_query_without_backend():
    q = build_retrieval_query(minimal_case())
    assert q.text == "Region boston. Four-way stop. Ego: stopped. Intended maneuver: left."
    assert q.origin is QueryOrigin.TEMPLATE_FALLBACK and q.warnings == ()


def test_chat_generated_query():
    text = "Signalized intersection, pedestrian in crosswalk, intended right turn on red"
    q = build_retrieval_query(minimal_case(), ScriptedChat([{"response": text}], mode="sequence"))
    assert q.text == text and q.origin is QueryOrigin.CHAT_GENERATED
    assert q.prompt_digest is not None


def test_transport_error_falls_back_to_template():
    backend = ScriptedChat([{"response": "", "error": {"status": 500}}], mode="sequence")
    q = build_retrieval_query(minimal_case(), backend)
    assert q.origin is QueryOrigin.TEMPLATE_FALLBACK
    assert q.text.startswith("Region boston.")
    assert q.warnings and "template" in q.warnings[0]


def test_blank_reply_falls_back_to_template():
    q = build_retrieval_query(minimal_case(), ScriptedChat([{"response": "  \n"}], mode="sequence"))
    assert q.origin is QueryOrigin.TEMPLATE_FALLBACK and q.warnings


@given(st.text(min_size=1).filter(str.strip), st.text(), st.sampled_from(list(GlobalIntent)))
def test_query_totality(env, ego, intent):
    q = build_retrieval_query(ScenarioCase("c", "r", env, ego, intent))
    assert q.text.strip()


def test_query_text_must_be_non_empty():
    with pytest.raises(ScenarioError):
        RetrievalQuery(" ", QueryOrigin.CHAT_GENERATED)
