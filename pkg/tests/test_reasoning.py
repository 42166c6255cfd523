import json
import re

import pytest

from regpilot.errors import (FixtureMissError, InputError, InvariantError, ReasoningFormatError,
                             StaleIndexError, TransportError)
from regpilot.providers import ChatBackend, ChatExchange, LocalEmbedder, ScriptedChat
from regpilot.reasoning import (ActionVerdict, Backends, DecisionOutput, Mode, Pipeline, RuleKind,
                                RuleRef, decide, extract_json_object, filter_and_classify,
                                judge_action, select_actions)
from regpilot.retrieval import RetrievalParams, RetrievalResult, build_index, retrieve
from regpilot.scenario import Action, GlobalIntent, ScenarioCase, load_scenario

FWD_ACCEL = Action.from_token("forward_accel")


class FnChat(ChatBackend):
    """Chat backend whose replies come from a Python function of the messages."""

    backend_id = "fn"

    def __init__(self, fn):
        self.fn = fn
        self.requests = []

    def exchange(self, messages):
        self.requests.append(list(messages))
        return ChatExchange(tuple(messages), self.fn(messages), self.backend_id, 1)


def stage_of(messages):
    system = messages[0]["content"]
    if "rule-filtering stage" in system:
        return "filter"
    if "action-judging stage" in system:
        return "judge"
    return "query"


def action_of(messages):
    return re.search(r"Action under review: (\S+)", messages[1]["content"]).group(1)


def listed_ids(messages):
    return re.findall(r"^- \[([^\]]+)\]", messages[1]["content"], re.M)


@pytest.fixture(scope="module")
def crosswalk(fixtures_dir):
    return load_scenario(fixtures_dir / "scenarios" / "clear_crosswalk.json")


@pytest.fixture(scope="module")
def retrieval(crosswalk, boston_corpus, boston_index):
    q = "approaching a marked crosswalk: slow down, never accelerate, do not change lanes"
    return retrieve(q, boston_index, boston_corpus, RetrievalParams(), LocalEmbedder())


def rules_json(*items):
    return json.dumps({"applicable_rules": [
        {"sent_id": sid, "kind": kind, "rationale": "applies"} for sid, kind in items]})


def verdict_json(mandatory=(), guidelines=(), explanation="ok", **extra):
    return json.dumps({"violated_mandatory": list(mandatory), "violated_guidelines": list(guidelines),
                       "explanation": explanation, **extra})


# -- filter ---------------------------------------------------------------------------

def test_empty_retrieval_makes_no_backend_call(crosswalk):
    backend = FnChat(lambda m: pytest.fail("backend must not be called"))
    assert filter_and_classify(RetrievalResult.empty(), crosswalk, crosswalk.action_set(), backend) == []
    assert backend.requests == []


def test_two_grounded_rules_with_kinds(crosswalk, retrieval):
    a, b = retrieval.sent_ids()[:2]
    backend = FnChat(lambda m: rules_json((a, "mandatory"), (b, "safety_guideline")))
    rules = filter_and_classify(retrieval, crosswalk, crosswalk.action_set(), backend)
    assert [(r.sent_id, r.kind) for r in rules] == [(a, RuleKind.MANDATORY), (b, RuleKind.SAFETY_GUIDELINE)]
    prompt = backend.requests[0][1]["content"]
    assert all(f"[{sid}]" in prompt for sid in retrieval.sent_ids())


def test_ungrounded_id_stripped_with_warning(crosswalk, retrieval):
    a = retrieval.sent_ids()[0]
    backend = FnChat(lambda m: rules_json(("nonexistent-99", "mandatory"), (a, "mandatory")))
    warnings = []
    rules = filter_and_classify(retrieval, crosswalk, crosswalk.action_set(), backend, warnings)
    assert [r.sent_id for r in rules] == [a]
    assert any("nonexistent-99" in w for w in warnings)


def test_only_ungrounded_ids_is_a_format_error(crosswalk, retrieval):
    backend = FnChat(lambda m: rules_json(("nonexistent-99", "mandatory")))
    with pytest.raises(ReasoningFormatError) as info:
        filter_and_classify(retrieval, crosswalk, crosswalk.action_set(), backend)
    assert len(backend.requests) == 4
    assert "nonexistent-99" in info.value.raw_response


def test_repair_prompt_quotes_error_then_succeeds(crosswalk, retrieval):
    a = retrieval.sent_ids()[0]
    replies = iter(["I think the rules are fine.", "```json\n" + rules_json((a, "guideline")) + "\n```"])
    backend = FnChat(lambda m: next(replies))
    trace = []
    rules = filter_and_classify(retrieval, crosswalk, crosswalk.action_set(), backend, trace=trace)
    assert rules == [RuleRef(a, RuleKind.SAFETY_GUIDELINE, "applies")]
    repair = backend.requests[1]
    assert repair[-2] == {"role": "assistant", "content": "I think the rules are fine."}
    assert "no JSON object" in repair[-1]["content"]
    assert [t.attempt for t in trace] == [1, 2]


def test_conflicting_kinds_for_one_id_rejected(crosswalk, retrieval):
    a = retrieval.sent_ids()[0]
    backend = FnChat(lambda m: rules_json((a, "mandatory"), (a, "safety_guideline")))
    with pytest.raises(ReasoningFormatError):
        filter_and_classify(retrieval, crosswalk, crosswalk.action_set(), backend)


@pytest.mark.parametrize("reply", [
    '{"applicable_rules": "all"}',
    '{"applicable_rules": [{"kind": "mandatory"}]}',
    '{"applicable_rules": [{"sent_id": "x", "kind": "optional"}]}',
    '[1, 2]',
    '{"rules": []}',
])
def test_schema_garbage_exhausts_budget(crosswalk, retrieval, reply):
    backend = FnChat(lambda m: reply)
    with pytest.raises(ReasoningFormatError) as info:
        filter_and_classify(retrieval, crosswalk, crosswalk.action_set(), backend)
    assert len(backend.requests) == 4  # ask, repair, two fresh re-asks
    assert info.value.raw_response == reply
    assert info.value.stage == "filter"


# -- judge ----------------------------------------------------------------------------

RULES = [RuleRef("m-1", RuleKind.MANDATORY), RuleRef("g-1", RuleKind.SAFETY_GUIDELINE)]


def judge(reply, rules=RULES, action=FWD_ACCEL, crosswalk=None):
    case = crosswalk or ScenarioCase("c", "boston", "Crosswalk ahead.", "25 km/h", GlobalIntent.FORWARD)
    warnings = []
    v = judge_action(action, rules, case, FnChat(lambda m: reply), warnings=warnings)
    return v, warnings


def test_guideline_only_is_compliant_but_not_safe():
    v, _ = judge(verdict_json(guidelines=["g-1"]))
    assert (v.compliant, v.safe) == (True, False)
    assert "g-1" in v.explanation


def test_mandatory_violation_forces_unsafe():
    v, _ = judge(verdict_json(mandatory=["m-1"]))
    assert (v.compliant, v.safe) == (False, False)


def test_vacuous_compliance_without_guidelines():
    v, _ = judge(verdict_json(), rules=[RuleRef("m-1", RuleKind.MANDATORY)])
    assert (v.compliant, v.safe) == (True, True)


def test_backend_booleans_are_ignored():
    v, warnings = judge(verdict_json(mandatory=["m-1"], compliant=True, safe=True))
    assert (v.compliant, v.safe) == (False, False)
    assert any("compliant=True" in w for w in warnings)


def test_misfiled_id_follows_filter_classification():
    v, warnings = judge(verdict_json(mandatory=["g-1"]))
    assert v.violated_mandatory == () and v.violated_guidelines == ("g-1",)
    assert (v.compliant, v.safe) == (True, False)
    assert warnings


def test_ungrounded_citation_stripped_if_others_remain():
    v, warnings = judge(verdict_json(mandatory=["m-1", "ghost-7"]))
    assert v.violated_mandatory == ("m-1",)
    assert any("ghost-7" in w for w in warnings)


def test_explanation_gets_rule_references():
    v, _ = judge(verdict_json(mandatory=["m-1"], explanation="Unsafe."))
    assert "m-1" in v.explanation


def test_judge_prompt_lists_rules_with_kinds():
    backend = FnChat(lambda m: verdict_json())
    case = ScenarioCase("c", "boston", "Crosswalk ahead.", "25 km/h", GlobalIntent.FORWARD)
    judge_action(FWD_ACCEL, RULES, case, backend)
    prompt = backend.requests[0][1]["content"]
    assert "- [m-1] MANDATORY" in prompt and "- [g-1] SAFETY GUIDELINE" in prompt
    assert "forward_accel" in prompt


def test_judge_garbage_raises_with_action():
    with pytest.raises(ReasoningFormatError) as info:
        judge('{"violated_mandatory": "m-1"}')
    assert info.value.action == "forward_accel" and info.value.stage == "judge"


def test_verdict_invariants_enforced_at_construction():
    with pytest.raises(InvariantError):
        ActionVerdict(FWD_ACCEL, True, True, ("m-1",), ())
    with pytest.raises(InvariantError):
        ActionVerdict(FWD_ACCEL, False, True, ("m-1",), ())
    with pytest.raises(InvariantError):
        ActionVerdict(FWD_ACCEL, True, True, (), ("g-1",))


def test_extract_json_object_variants():
    assert extract_json_object('Sure! {"a": 1} hope that helps') == {"a": 1}
    assert extract_json_object('```json\n{"a": 2}\n```') == {"a": 2}


# -- decide ---------------------------------------------------------------------------

def scripted_decide_backend(filter_reply, judge_replies):
    def fn(messages):
        stage = stage_of(messages)
        if stage == "query":
            return "Marked crosswalk ahead; slow down, do not accelerate, do not change lanes."
        if stage == "filter":
            return filter_reply(listed_ids(messages))
        return judge_replies(action_of(messages), listed_ids(messages))
    return FnChat(fn)


def pipeline(backend, corpus, index, **kw):
    return Pipeline(Backends(chat_reasoning=backend, embed_stage1=LocalEmbedder(), chat_query=backend),
                    corpus, index, **kw)


def crosswalk_pedestrians_backend():
    def judge_reply(action, ids):
        if action in ("forward_current", "forward_accel"):
            return verdict_json(mandatory=ids[:1])
        if action == "forward_decel":
            return verdict_json()
        return verdict_json(mandatory=ids[:1])
    return scripted_decide_backend(lambda ids: rules_json((ids[0], "mandatory")), judge_reply)


def test_occupied_crosswalk_selects_deceleration(fixtures_dir, boston_corpus, boston_index):
    case = load_scenario(fixtures_dir / "scenarios" / "occupied_crosswalk.json")
    out = pipeline(crosswalk_pedestrians_backend(), boston_corpus, boston_index).decide(case)
    assert [a.token for a in out.selected_actions] == ["forward_decel"]
    assert [v.action for v in out.verdicts] == case.action_set()
    assert [t.stage for t in out.trace] == ["query", "filter"] + ["judge"] * 5
    assert [t.action for t in out.trace[2:]] == [a.token for a in case.action_set()]


def test_all_clear_selects_whole_action_set(crosswalk, boston_corpus, boston_index):
    backend = scripted_decide_backend(lambda ids: rules_json((ids[0], "mandatory")),
                                      lambda action, ids: verdict_json())
    out = pipeline(backend, boston_corpus, boston_index).decide(crosswalk)
    assert list(out.selected_actions) == crosswalk.action_set()


def test_same_inputs_give_byte_identical_output(crosswalk, boston_corpus, boston_index):
    a = pipeline(crosswalk_pedestrians_backend(), boston_corpus, boston_index).decide(crosswalk)
    b = pipeline(crosswalk_pedestrians_backend(), boston_corpus, boston_index).decide(crosswalk)
    assert a.to_json() == b.to_json()
    assert a.to_json("terse") == b.to_json("terse")


def test_parallel_judging_matches_sequential(crosswalk, boston_corpus, boston_index):
    seq = pipeline(crosswalk_pedestrians_backend(), boston_corpus, boston_index).decide(crosswalk)
    par = pipeline(crosswalk_pedestrians_backend(), boston_corpus, boston_index,
                   max_workers=5).decide(crosswalk)
    assert par.to_json() == seq.to_json()


def test_one_failed_action_fails_the_whole_case(crosswalk, boston_corpus, boston_index):
    def judge_reply(action, ids):
        return "no idea" if action == "lane_change_left" else verdict_json()
    backend = scripted_decide_backend(lambda ids: rules_json((ids[0], "mandatory")), judge_reply)
    with pytest.raises(ReasoningFormatError) as info:
        pipeline(backend, boston_corpus, boston_index).decide(crosswalk)
    assert info.value.stage == "judge" and info.value.action == "lane_change_left"


def test_baseline_touches_no_corpus_and_cites_nothing(crosswalk):
    seen = []

    def fn(messages):
        seen.append(stage_of(messages))
        assert "(none)" in messages[1]["content"]
        return verdict_json(explanation="No rules given.")

    out = decide(crosswalk, None, None, None, Backends(chat_reasoning=FnChat(fn)), Mode.BASELINE)
    assert out.applicable_rules == () and out.retrieval.sentences == ()
    assert all(v.cited() == () for v in out.verdicts)
    assert all(v.compliant and v.safe for v in out.verdicts)
    assert seen == ["judge"] * 5
    assert out.query_text is None


def test_baseline_citations_cannot_be_grounded(crosswalk):
    backend = FnChat(lambda m: verdict_json(mandatory=["ma-gl-89-7-1-1"]))
    with pytest.raises(ReasoningFormatError):
        decide(crosswalk, None, None, None, Backends(chat_reasoning=backend), Mode.BASELINE)


def test_with_trr_requires_corpus_and_index(crosswalk):
    with pytest.raises(InputError):
        decide(crosswalk, None, None, None, Backends(chat_reasoning=FnChat(str)), Mode.WITH_TRR)


def test_region_without_documents(crosswalk, singapore_corpus, singapore_index):
    backend = FnChat(lambda m: verdict_json())
    with pytest.raises(InputError) as info:
        pipeline(backend, singapore_corpus, singapore_index).decide(crosswalk)
    assert info.value.stage == "retrieve"


def test_stage_names_attached_to_errors(crosswalk, boston_corpus, boston_index, singapore_corpus):
    def fn(messages):
        if stage_of(messages) == "judge":
            raise TransportError("down", 503)
        return scripted_decide_backend(lambda ids: rules_json((ids[0], "mandatory")), None).fn(messages)

    with pytest.raises(TransportError) as info:
        pipeline(FnChat(fn), boston_corpus, boston_index).decide(crosswalk)
    assert info.value.stage == "judge"

    from regpilot.corpus import Corpus
    stale = Corpus(boston_corpus.documents[1:])
    with pytest.raises(StaleIndexError) as info:
        pipeline(crosswalk_pedestrians_backend(), stale, boston_index).decide(crosswalk)
    assert info.value.stage == "retrieve"

    missing = ScriptedChat([], mode="sequence")
    with pytest.raises(FixtureMissError) as info:
        decide(crosswalk, None, None, None, Backends(chat_reasoning=missing), Mode.BASELINE)
    assert info.value.stage == "judge"


def test_query_transport_failure_falls_back(crosswalk, boston_corpus, boston_index):
    def fn(messages):
        if stage_of(messages) == "query":
            raise TransportError("query backend down", 502)
        return crosswalk_pedestrians_backend().fn(messages)

    out = pipeline(FnChat(fn), boston_corpus, boston_index).decide(crosswalk)
    assert out.query_origin == "template_fallback"
    assert any("template" in w for w in out.warnings)


def test_terse_output_drops_explanations(crosswalk, boston_corpus, boston_index):
    out = pipeline(crosswalk_pedestrians_backend(), boston_corpus, boston_index).decide(crosswalk, request_id="r-1")
    full, terse = out.to_dict(), out.to_dict("terse")
    assert "explanation" in full["verdicts"][0] and "explanation" not in terse["verdicts"][0]
    assert terse["retrieved"] == out.retrieval.sent_ids()
    assert full["request_id"] == "r-1"
    assert list(full)[:3] == ["case_id", "region", "mode"]


def test_select_actions_law():
    vs = [ActionVerdict.from_violations(a, m, g) for a, m, g in [
        (Action.from_token("forward_current"), (), ()),
        (Action.from_token("forward_accel"), (), ("g",)),
        (Action.from_token("forward_decel"), ("m",), ())]]
    assert select_actions(vs) == (Action.from_token("forward_current"),)
    assert isinstance(DecisionOutput, type)
