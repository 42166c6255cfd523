"""Staged compliance/safety reasoning over a chat backend.

Stage ``filter`` asks the backend which retrieved rules apply and whether each
is mandatory or a safety guideline.  Stage ``judge`` asks, one action at a
time, which of those rules the action violates.  The backend only supplies
violation lists; ``compliant`` and ``safe`` are always derived here:

    compliant = no mandatory rule violated
    safe      = compliant and no safety guideline violated
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

from .corpus import Corpus
from .errors import InputError, InvariantError, ReasoningFormatError, RegpilotError
from .providers.chat import messages_digest
from .retrieval import ParagraphIndex, RetrievalParams, RetrievalResult, retrieve
from .scenario import Action, ScenarioCase, build_retrieval_query, extract_action_set

log = logging.getLogger(__name__)

PROMPT_VERSION = "v1"
# after a malformed reply: one repair exchange, then this many fresh re-asks
FULL_RETRIES = 2


class Mode(str, Enum):
    WITH_TRR = "with_trr"
    BASELINE = "baseline"


class RuleKind(str, Enum):
    MANDATORY = "mandatory"
    SAFETY_GUIDELINE = "safety_guideline"


_KIND_ALIASES = {
    "mandatory": RuleKind.MANDATORY,
    "mandatory_rule": RuleKind.MANDATORY,
    "safety_guideline": RuleKind.SAFETY_GUIDELINE,
    "guideline": RuleKind.SAFETY_GUIDELINE,
    "safety": RuleKind.SAFETY_GUIDELINE,
}


@dataclass(frozen=True)
class RuleRef:
    sent_id: str
    kind: RuleKind
    rationale: str = ""

    def to_dict(self, terse: bool = False) -> dict:
        d = {"sent_id": self.sent_id, "kind": self.kind.value}
        if not terse:
            d["rationale"] = self.rationale
        return d


@dataclass(frozen=True)
class ActionVerdict:
    action: Action
    compliant: bool
    safe: bool
    violated_mandatory: tuple[str, ...] = ()
    violated_guidelines: tuple[str, ...] = ()
    explanation: str = ""

    def __post_init__(self):
        if self.compliant != (not self.violated_mandatory):
            raise InvariantError(f"{self.action}: compliant must equal 'no mandatory violation'")
        if self.safe != (self.compliant and not self.violated_guidelines):
            raise InvariantError(f"{self.action}: safe must equal compliant and no guideline violation")

    @classmethod
    def from_violations(cls, action: Action, mandatory, guidelines, explanation: str = "") -> "ActionVerdict":
        mandatory, guidelines = tuple(mandatory), tuple(guidelines)
        compliant = not mandatory
        return cls(action, compliant, compliant and not guidelines, mandatory, guidelines, explanation)

    def cited(self) -> tuple[str, ...]:
        return self.violated_mandatory + self.violated_guidelines

    def to_dict(self, terse: bool = False) -> dict:
        d = {
            "action": self.action.token,
            "compliant": self.compliant,
            "safe": self.safe,
            "violated_mandatory": list(self.violated_mandatory),
            "violated_guidelines": list(self.violated_guidelines),
        }
        if not terse:
            d["explanation"] = self.explanation
        return d


@dataclass(frozen=True)
class StageRecord:
    stage: str
    prompt_digest: str
    backend_id: str
    latency_ms: int
    action: str | None = None
    attempt: int = 1

    def to_dict(self) -> dict:
        d = {"stage": self.stage}
        if self.action is not None:
            d["action"] = self.action
        d.update(attempt=self.attempt, prompt_digest=self.prompt_digest,
                 backend_id=self.backend_id, latency_ms=self.latency_ms)
        return d


@dataclass(frozen=True)
class DecisionOutput:
    case_id: str
    region: str
    mode: Mode
    verdicts: tuple[ActionVerdict, ...]
    selected_actions: tuple[Action, ...]
    applicable_rules: tuple[RuleRef, ...]
    trace: tuple[StageRecord, ...]
    retrieval: RetrievalResult
    query_text: str | None = None
    query_origin: str | None = None
    warnings: tuple[str, ...] = ()
    request_id: str | None = None

    def to_dict(self, verbosity: str = "full") -> dict:
        terse = verbosity == "terse"
        d: dict = {"case_id": self.case_id, "region": self.region, "mode": self.mode.value}
        if self.request_id is not None:
            d["request_id"] = self.request_id
        d["query"] = None if self.query_text is None else {"text": self.query_text,
                                                             "origin": self.query_origin}
        if terse:
            d["retrieved"] = self.retrieval.sent_ids()
        else:
            d["retrieved"] = [s.to_dict() for s in self.retrieval.sentences]
            d["figures"] = [f.to_dict() for f in self.retrieval.figures]
        d["applicable_rules"] = [r.to_dict(terse) for r in self.applicable_rules]
        d["verdicts"] = [v.to_dict(terse) for v in self.verdicts]
        d["selected_actions"] = [a.token for a in self.selected_actions]
        d["warnings"] = list(self.warnings)
        d["trace"] = [t.to_dict() for t in self.trace]
        return d

    def to_json(self, verbosity: str = "full") -> str:
        return json.dumps(self.to_dict(verbosity), indent=2, ensure_ascii=False)


def select_actions(verdicts) -> tuple[Action, ...]:
    return tuple(v.action for v in verdicts if v.compliant and v.safe)


# -- structured response handling -------------------------------------------------

class _SchemaViolation(Exception):
    pass


_FENCE_RE = re.compile(r"^```[a-zA-Z]*\s*|\s*```$")


def extract_json_object(text: str) -> dict:
    text = _FENCE_RE.sub("", text.strip())
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise _SchemaViolation("response contains no JSON object")
    try:
        obj = json.loads(text[start:end + 1])
    except json.JSONDecodeError as exc:
        raise _SchemaViolation(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise _SchemaViolation("top-level JSON value must be an object")
    return obj


def _id_list(obj: dict, key: str) -> list[str]:
    value = obj.get(key, None)
    if value is None:
        raise _SchemaViolation(f"missing field {key!r}")
    if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
        raise _SchemaViolation(f"field {key!r} must be a list of sent_id strings")
    return [x.strip() for x in value]


def _prompt(name: str) -> str:
    return resources.files("regpilot.prompts").joinpath(PROMPT_VERSION, name).read_text(encoding="utf-8")


def _run_structured(backend, messages: list[dict], parse, stage: str, action: str | None = None):
    """Exchange ``messages`` until ``parse`` accepts the reply.

    Returns ``(parsed, records)``.  Budget: the first ask, one repair prompt
    quoting the parse error, then FULL_RETRIES fresh asks.
    """
    records: list[StageRecord] = []
    plan = [messages]
    raw, error = "", ""
    attempt = 0
    while plan:
        msgs = plan.pop(0)
        attempt += 1
        ex = backend.exchange(msgs)
        records.append(StageRecord(stage, messages_digest(msgs), ex.backend_id, ex.latency_ms,
                                   action, attempt))
        raw = ex.response_text
        try:
            return parse(extract_json_object(raw)), records
        except _SchemaViolation as exc:
            error = str(exc)
            log.info("%s%s: schema violation on attempt %d: %s", stage,
                     f"[{action}]" if action else "", attempt, error)
        if attempt == 1:
            repair = _prompt("repair_user.txt").format(error=error)
            plan.append(messages + [{"role": "assistant", "content": raw},
                                    {"role": "user", "content": repair}])
            plan.extend([messages] * FULL_RETRIES)
    raise ReasoningFormatError(
        f"{stage}{f' for {action}' if action else ''}: backend output still malformed after "
        f"{attempt} attempts ({error})", raw_response=raw, stage=stage, action=action)


# -- stage 1 -----------------------------------------------------------------------

def _scenario_fields(case: ScenarioCase) -> dict:
    return {
        "region": case.region,
        "environment_text": case.environment_text,
        "ego_state_text": case.ego_state_text,
        "intent": case.intent.value,
    }


def filter_messages(retrieval: RetrievalResult, case: ScenarioCase, actions) -> list[dict]:
    rules = "\n".join(
        f"- [{s.sent_id}] ({s.tier.value}; {' > '.join(s.header_path)}) {s.text}"
        for s in retrieval.sentences
    )
    figures = "\n".join(f"- figure {f.fig_id} ({f.doc_id}): {f.caption_text}" for f in retrieval.figures)
    if figures:
        rules += "\n\nFigures referenced by these rules:\n" + figures
    user = _prompt("filter_user.txt").format(
        actions="\n".join(f"- {a.token}: {a.describe()}" for a in actions),
        rules=rules, **_scenario_fields(case))
    return [{"role": "system", "content": _prompt("filter_system.txt")},
            {"role": "user", "content": user}]


def _parse_rules(obj: dict, retrieved: list[str], warnings: list[str]) -> tuple[RuleRef, ...]:
    items = obj.get("applicable_rules")
    if not isinstance(items, list):
        raise _SchemaViolation("field 'applicable_rules' must be a list")
    found: dict[str, RuleRef] = {}
    ungrounded = []
    for item in items:
        if not isinstance(item, dict) or not isinstance(item.get("sent_id"), str):
            raise _SchemaViolation("each applicable rule needs a string 'sent_id'")
        raw_kind = item.get("kind")
        if not isinstance(raw_kind, str):
            raise _SchemaViolation(f"rule {item['sent_id']!r} needs a 'kind'")
        kind = _KIND_ALIASES.get(raw_kind.strip().lower().replace(" ", "_").replace("-", "_"))
        if kind is None:
            raise _SchemaViolation(f"rule {item['sent_id']!r}: kind must be mandatory or safety_guideline")
        rationale = item.get("rationale", "")
        if not isinstance(rationale, str):
            raise _SchemaViolation(f"rule {item['sent_id']!r}: rationale must be a string")
        sent_id = item["sent_id"].strip()
        if sent_id not in retrieved:
            ungrounded.append(sent_id)
            continue
        if sent_id in found and found[sent_id].kind is not kind:
            raise _SchemaViolation(f"rule {sent_id!r} classified as both kinds")
        found.setdefault(sent_id, RuleRef(sent_id, kind, rationale.strip()))
    if ungrounded and not found:
        raise _SchemaViolation(f"none of the cited sent_ids were retrieved: {ungrounded}")
    for sid in ungrounded:
        warnings.append(f"filter: dropped ungrounded rule id {sid!r}")
    return tuple(found[sid] for sid in retrieved if sid in found)


def filter_and_classify(retrieval: RetrievalResult, case: ScenarioCase, actions, chat_backend,
                        warnings: list[str] | None = None, trace: list | None = None) -> list[RuleRef]:
    """Applicable rules among the retrieved sentences, each classified by kind."""
    warnings = warnings if warnings is not None else []
    if not retrieval.sentences:
        return []
    retrieved = retrieval.sent_ids()
    local: list[str] = []
    rules, records = _run_structured(
        chat_backend, filter_messages(retrieval, case, actions),
        lambda obj: _parse_rules(obj, retrieved, local), "filter")
    warnings.extend(local)
    for w in local:
        log.warning(w)
    if trace is not None:
        trace.extend(records)
    return list(rules)


# -- stage 2 -----------------------------------------------------------------------

def judge_messages(action: Action, rules, case: ScenarioCase, retrieval: RetrievalResult | None) -> list[dict]:
    texts = {s.sent_id: s.text for s in retrieval.sentences} if retrieval else {}
    label = {RuleKind.MANDATORY: "MANDATORY", RuleKind.SAFETY_GUIDELINE: "SAFETY GUIDELINE"}
    lines = [f"- [{r.sent_id}] {label[r.kind]}: {texts.get(r.sent_id, '')}".rstrip() for r in rules]
    user = _prompt("judge_user.txt").format(
        action_token=action.token, action_text=action.describe(),
        rules="\n".join(lines) if lines else "(none)", **_scenario_fields(case))
    return [{"role": "system", "content": _prompt("judge_system.txt")},
            {"role": "user", "content": user}]


def _parse_verdict(obj: dict, action: Action, rules, warnings: list[str]) -> ActionVerdict:
    mandatory_raw = _id_list(obj, "violated_mandatory")
    guideline_raw = _id_list(obj, "violated_guidelines")
    explanation = obj.get("explanation", "")
    if not isinstance(explanation, str):
        raise _SchemaViolation("field 'explanation' must be a string")
    kinds = {r.sent_id: r.kind for r in rules}
    cited = list(dict.fromkeys(mandatory_raw + guideline_raw))
    ungrounded = [sid for sid in cited if sid not in kinds]
    if ungrounded and len(ungrounded) == len(cited):
        raise _SchemaViolation(f"cited sent_ids are not among the applicable rules: {ungrounded}")
    for sid in ungrounded:
        warnings.append(f"judge[{action.token}]: dropped ungrounded rule id {sid!r}")
    for sid in mandatory_raw:
        if kinds.get(sid) is RuleKind.SAFETY_GUIDELINE:
            warnings.append(f"judge[{action.token}]: {sid} is a safety guideline, not mandatory")
    for sid in guideline_raw:
        if kinds.get(sid) is RuleKind.MANDATORY:
            warnings.append(f"judge[{action.token}]: {sid} is mandatory, not a safety guideline")
    # classification from the filter stage decides which list an id belongs to
    order = [r.sent_id for r in rules]
    grounded = set(cited) - set(ungrounded)
    mandatory = [s for s in order if s in grounded and kinds[s] is RuleKind.MANDATORY]
    guidelines = [s for s in order if s in grounded and kinds[s] is RuleKind.SAFETY_GUIDELINE]
    explanation = " ".join(explanation.split())
    missing = [s for s in mandatory + guidelines if s not in explanation]
    if missing:
        explanation = f"{explanation} (Rules cited: {', '.join(missing)})".strip()
    verdict = ActionVerdict.from_violations(action, mandatory, guidelines, explanation)
    for key in ("compliant", "safe"):
        if isinstance(obj.get(key), bool) and obj[key] != getattr(verdict, key):
            warnings.append(f"judge[{action.token}]: backend said {key}={obj[key]}, "
                            f"violation lists imply {getattr(verdict, key)}")
    return verdict


def judge_action(action: Action, rules, case: ScenarioCase, chat_backend,
                 retrieval: RetrievalResult | None = None, warnings: list[str] | None = None,
                 trace: list | None = None) -> ActionVerdict:
    warnings = warnings if warnings is not None else []
    local: list[str] = []
    verdict, records = _run_structured(
        chat_backend, judge_messages(action, rules, case, retrieval),
        lambda obj: _parse_verdict(obj, action, rules, local), "judge", action.token)
    warnings.extend(local)
    for w in local:
        log.warning(w)
    if trace is not None:
        trace.extend(records)
    return verdict


# -- orchestration -----------------------------------------------------------------

@dataclass
class Backends:
    chat_reasoning: object
    embed_stage1: object | None = None
    embed_stage2: object | None = None
    chat_query: object | None = None


def _staged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except RegpilotError as exc:
        if exc.stage is None:
            exc.stage = stage
        raise


def decide(case: ScenarioCase, corpus: Corpus | None, index: ParagraphIndex | None,
           params: RetrievalParams | None, backends: Backends, mode: Mode | str = Mode.WITH_TRR,
           include_lane_changes: bool = True, max_workers: int = 1,
           request_id: str | None = None) -> DecisionOutput:
    """Run query -> retrieve -> filter -> judge -> select for one case.

    Baseline mode skips query generation and retrieval entirely and reasons
    over an empty rule set; ``corpus`` and ``index`` are never touched.
    """
    mode = Mode(mode)
    params = params or RetrievalParams()
    actions = extract_action_set(case.intent, include_lane_changes)
    warnings: list[str] = []
    trace: list[StageRecord] = []
    query_text = query_origin = None

    if mode is Mode.BASELINE:
        retrieval = RetrievalResult.empty("", params)
    else:
        if corpus is None or index is None or backends.embed_stage1 is None:
            raise InputError("with_trr mode needs a corpus, an index and a stage-1 embedder")
        view = corpus.region_view(case.region)
        if not len(view):
            err = InputError(f"no regulation documents loaded for region {case.region!r}")
            err.stage = "retrieve"
            raise err
        query = _staged("query", build_retrieval_query, case, backends.chat_query)
        query_text, query_origin = query.text, query.origin.value
        warnings.extend(query.warnings)
        if query.prompt_digest is not None:
            trace.append(StageRecord("query", query.prompt_digest, query.backend_id or "",
                                     query.latency_ms))
        retrieval = _staged("retrieve", retrieve, query, index, view, params,
                            backends.embed_stage1, backends.embed_stage2)
        warnings.extend(retrieval.warnings)

    rules = _staged("filter", filter_and_classify, retrieval, case, actions,
                    backends.chat_reasoning, warnings, trace)

    def _judge(action):
        w: list[str] = []
        t: list[StageRecord] = []
        try:
            v = judge_action(action, rules, case, backends.chat_reasoning, retrieval, w, t)
        except ReasoningFormatError as exc:
            return None, w, t, exc
        return v, w, t, None

    if max_workers > 1 and len(actions) > 1:
        with ThreadPoolExecutor(max_workers=min(max_workers, len(actions))) as pool:
            results = list(pool.map(lambda a: _staged("judge", _judge, a), actions))
    else:
        results = [_staged("judge", _judge, a) for a in actions]

    verdicts, failures = [], []
    for action, (verdict, w, t, exc) in zip(actions, results):
        warnings.extend(w)
        trace.extend(t)
        if exc is not None:
            failures.append(exc)
        else:
            verdicts.append(verdict)
    if failures:
        first = failures[0]
        err = ReasoningFormatError(
            f"case {case.case_id}: judging failed for "
            f"{', '.join(f.action for f in failures)}: {first}",
            raw_response=first.raw_response, stage="judge", action=first.action)
        raise err

    return DecisionOutput(
        case_id=case.case_id,
        region=case.region,
        mode=mode,
        verdicts=tuple(verdicts),
        selected_actions=select_actions(verdicts),
        applicable_rules=tuple(rules),
        trace=tuple(trace),
        retrieval=retrieval,
        query_text=query_text,
        query_origin=query_origin,
        warnings=tuple(warnings),
        request_id=request_id,
    )


@dataclass
class Pipeline:
    """Everything ``decide`` needs, bundled for the CLI, service and harness."""

    backends: Backends
    corpus: Corpus | None = None
    index: ParagraphIndex | None = None
    params: RetrievalParams = field(default_factory=RetrievalParams)
    mode: Mode = Mode.WITH_TRR
    include_lane_changes: bool = True
    max_workers: int = 1

    def decide(self, case: ScenarioCase, request_id: str | None = None,
               mode: Mode | str | None = None) -> DecisionOutput:
        mode = Mode(mode) if mode is not None else self.mode
        return decide(case, self.corpus, self.index, self.params, self.backends, mode,
                      self.include_lane_changes, self.max_workers, request_id)
