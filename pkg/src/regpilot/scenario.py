"""Driving scenarios, the action space and retrieval-query construction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

from .errors import ScenarioError, TransportError

log = logging.getLogger(__name__)


class GlobalIntent(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    FORWARD = "forward"


class Maneuver(str, Enum):
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    FORWARD = "forward"
    LANE_CHANGE_LEFT = "lane_change_left"
    LANE_CHANGE_RIGHT = "lane_change_right"


class SpeedMode(str, Enum):
    CURRENT = "current"
    ACCELERATE = "accel"
    DECELERATE = "decel"


_SPEED_WORDS = {
    SpeedMode.CURRENT: "with current speed",
    SpeedMode.ACCELERATE: "with acceleration",
    SpeedMode.DECELERATE: "with deceleration",
}
_MANEUVER_WORDS = {
    Maneuver.TURN_LEFT: "turn left",
    Maneuver.TURN_RIGHT: "turn right",
    Maneuver.FORWARD: "go forward",
    Maneuver.LANE_CHANGE_LEFT: "change lane to the left",
    Maneuver.LANE_CHANGE_RIGHT: "change lane to the right",
}


@dataclass(frozen=True, order=True)
class Action:
    maneuver: Maneuver
    speed: SpeedMode | None = None

    def __post_init__(self):
        lane_change = self.maneuver in (Maneuver.LANE_CHANGE_LEFT, Maneuver.LANE_CHANGE_RIGHT)
        if lane_change != (self.speed is None):
            raise ValueError(f"invalid action {self.maneuver.value}/{self.speed}")

    @property
    def token(self) -> str:
        if self.speed is None:
            return self.maneuver.value
        return f"{self.maneuver.value}_{self.speed.value}"

    def describe(self) -> str:
        words = _MANEUVER_WORDS[self.maneuver]
        return f"{words} {_SPEED_WORDS[self.speed]}" if self.speed else words

    @classmethod
    def from_token(cls, token: str) -> "Action":
        try:
            return _BY_TOKEN[token]
        except KeyError:
            raise ScenarioError(f"unknown action token {token!r}", field="ground_truth") from None

    def __str__(self) -> str:
        return self.token


ACTION_SPACE: tuple[Action, ...] = tuple(
    Action(m, s)
    for m in (Maneuver.TURN_LEFT, Maneuver.TURN_RIGHT, Maneuver.FORWARD)
    for s in SpeedMode
) + (Action(Maneuver.LANE_CHANGE_LEFT), Action(Maneuver.LANE_CHANGE_RIGHT))

_BY_TOKEN = {a.token: a for a in ACTION_SPACE}

_INTENT_MANEUVER = {
    GlobalIntent.LEFT: Maneuver.TURN_LEFT,
    GlobalIntent.RIGHT: Maneuver.TURN_RIGHT,
    GlobalIntent.FORWARD: Maneuver.FORWARD,
}


def extract_action_set(intent: GlobalIntent, include_lane_changes: bool = True) -> list[Action]:
    """Actions aligned with the global-plan intent, in canonical order."""
    intent = GlobalIntent(intent)
    actions = [Action(_INTENT_MANEUVER[intent], s) for s in SpeedMode]
    if intent is GlobalIntent.FORWARD and include_lane_changes:
        actions += [Action(Maneuver.LANE_CHANGE_LEFT), Action(Maneuver.LANE_CHANGE_RIGHT)]
    return actions


@dataclass(frozen=True)
class ScenarioCase:
    case_id: str
    region: str
    environment_text: str
    ego_state_text: str
    intent: GlobalIntent
    ground_truth: dict[Action, tuple[bool, bool]] | None = field(default=None, compare=True)

    def action_set(self, include_lane_changes: bool = True) -> list[Action]:
        return extract_action_set(self.intent, include_lane_changes)

    def expected_selection(self, include_lane_changes: bool = True) -> list[Action]:
        if self.ground_truth is None:
            raise ScenarioError(f"case {self.case_id} has no ground truth", field="ground_truth")
        return [a for a in self.action_set(include_lane_changes)
                if all(self.ground_truth[a])]

    def to_dict(self) -> dict:
        d = {
            "case_id": self.case_id,
            "region": self.region,
            "environment_text": self.environment_text,
            "ego_state_text": self.ego_state_text,
            "intent": self.intent.value,
        }
        if self.ground_truth is not None:
            d["ground_truth"] = {
                a.token: {"compliant": c, "safe": s}
                for a, (c, s) in sorted(self.ground_truth.items(), key=lambda kv: ACTION_SPACE.index(kv[0]))
            }
        return d


def _require_str(data: dict, key: str, allow_empty: bool = False) -> str:
    if key not in data:
        raise ScenarioError(f"missing field {key!r}", field=key)
    value = data[key]
    if not isinstance(value, str):
        raise ScenarioError(f"field {key!r} must be a string", field=key)
    if not allow_empty and not value.strip():
        raise ScenarioError(f"field {key!r} must not be empty", field=key)
    return value


def scenario_from_dict(data, include_lane_changes: bool = True) -> ScenarioCase:
    """Validate a scenario JSON object; errors name the offending field."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    case_id = _require_str(data, "case_id")
    region = _require_str(data, "region")
    environment_text = _require_str(data, "environment_text")
    ego_state_text = _require_str(data, "ego_state_text", allow_empty=True)
    raw_intent = _require_str(data, "intent")
    try:
        intent = GlobalIntent(raw_intent.strip().lower())
    except ValueError:
        raise ScenarioError(f"intent must be left, right or forward, got {raw_intent!r}",
                            field="intent") from None
    ground_truth = None
    if data.get("ground_truth") is not None:
        raw_gt = data["ground_truth"]
        if not isinstance(raw_gt, dict):
            raise ScenarioError("ground_truth must be an object", field="ground_truth")
        ground_truth = {}
        for token, labels in raw_gt.items():
            action = Action.from_token(token)
            if (not isinstance(labels, dict) or not isinstance(labels.get("compliant"), bool)
                    or not isinstance(labels.get("safe"), bool)):
                raise ScenarioError(f"ground_truth[{token!r}] needs boolean compliant and safe",
                                    field="ground_truth")
            ground_truth[action] = (labels["compliant"], labels["safe"])
        expected = set(extract_action_set(intent, include_lane_changes))
        if set(ground_truth) != expected:
            missing = sorted(a.token for a in expected - set(ground_truth))
            extra = sorted(a.token for a in set(ground_truth) - expected)
            raise ScenarioError(
                f"case {case_id}: ground_truth must cover exactly the action set "
                f"(missing {missing}, unexpected {extra})", field="ground_truth")
    extra_fields = set(data) - {"case_id", "region", "environment_text", "ego_state_text",
                                "intent", "ground_truth"}
    if extra_fields:
        raise ScenarioError(f"unknown field(s) {sorted(extra_fields)}", field=sorted(extra_fields)[0])
    return ScenarioCase(case_id, region, environment_text, ego_state_text, intent, ground_truth)


def load_scenario(path: str | Path, include_lane_changes: bool = True) -> ScenarioCase:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return scenario_from_dict(data, include_lane_changes)


class QueryOrigin(str, Enum):
    CHAT_GENERATED = "chat_generated"
    TEMPLATE_FALLBACK = "template_fallback"


@dataclass(frozen=True)
class RetrievalQuery:
    text: str
    origin: QueryOrigin
    warnings: tuple[str, ...] = ()
    prompt_digest: str | None = None
    backend_id: str | None = None
    latency_ms: int = 0

    def __post_init__(self):
        if not self.text.strip():
            raise ScenarioError("retrieval query text is empty")


def template_query(case: ScenarioCase) -> str:
    return (f"Region {case.region}. {case.environment_text} Ego: {case.ego_state_text}. "
            f"Intended maneuver: {case.intent.value}.")


def _prompt(name: str) -> str:
    return resources.files("regpilot.prompts").joinpath("v1", name).read_text(encoding="utf-8")


def query_messages(case: ScenarioCase) -> list[dict]:
    user = _prompt("query_user.txt").format(
        region=case.region,
        environment_text=case.environment_text,
        ego_state_text=case.ego_state_text,
        intent=case.intent.value,
    )
    return [{"role": "system", "content": _prompt("query_system.txt")},
            {"role": "user", "content": user}]


def build_retrieval_query(case: ScenarioCase, chat_backend=None) -> RetrievalQuery:
    """Ask the chat backend for a scenario summary; fall back to a fixed template."""
    if chat_backend is None:
        return RetrievalQuery(template_query(case), QueryOrigin.TEMPLATE_FALLBACK)
    from .providers.chat import messages_digest

    messages = query_messages(case)
    try:
        ex = chat_backend.exchange(messages)
    except TransportError as exc:
        note = f"query generation failed ({exc}); using template query"
        log.warning(note)
        return RetrievalQuery(template_query(case), QueryOrigin.TEMPLATE_FALLBACK, (note,),
                              messages_digest(messages), chat_backend.backend_id)
    text = " ".join(ex.response_text.split())
    if not text:
        note = "query generation returned empty text; using template query"
        log.warning(note)
        return RetrievalQuery(template_query(case), QueryOrigin.TEMPLATE_FALLBACK, (note,),
                              messages_digest(messages), ex.backend_id, ex.latency_ms)
    return RetrievalQuery(text, QueryOrigin.CHAT_GENERATED, (), messages_digest(messages),
                          ex.backend_id, ex.latency_ms)
