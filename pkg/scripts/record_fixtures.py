"""Record the digest-mode chat fixtures used by the tests and the example configs.

The chat side is played by ``AuthoringChat``: a deterministic stand-in for a
language model that answers from ``fixtures/authoring.json``.  Rules and
violations are written there as text fragments of the regulation sentences,
so the recorded answers stay meaningful when sentence ids are renumbered;
re-run this script after editing the corpora, scenarios or prompts.

    python scripts/record_fixtures.py            # rewrite fixtures/chat/*.jsonl
    python scripts/record_fixtures.py --check    # fail if the fixtures are stale
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from regpilot.corpus import load_corpus
from regpilot.harness import load_suite
from regpilot.providers import ChatBackend, ChatExchange, LocalEmbedder, RecordingChat
from regpilot.reasoning import Backends, Mode, Pipeline
from regpilot.retrieval import RetrievalParams, build_index
from regpilot.scenario import query_messages

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
SUITES = {"boston": ["hypothesized.json"], "singapore": ["singapore.json"]}
BACKEND_ID = "authoring-v1"

_FILTER_LINE = re.compile(r"^- \[([^\]]+)\] \([^)]*\) (.*)$")
_JUDGE_LINE = re.compile(r"^- \[([^\]]+)\] (?:MANDATORY|SAFETY GUIDELINE): (.*)$")
_FIELD = re.compile(r"^(Region|Scene|Action under review): (.*)$", re.M)


class AuthoringError(RuntimeError):
    pass


class AuthoringChat(ChatBackend):
    backend_id = BACKEND_ID

    def __init__(self, authoring: dict, cases):
        self.authoring = authoring
        self._keys = {(c.region, c.environment_text): f"{c.region}/{c.case_id}" for c in cases}
        self._query_system = query_messages(cases[0])[0]["content"]

    def _entry(self, user: str) -> tuple[dict, dict]:
        fields = dict(_FIELD.findall(user))
        key = self._keys.get((fields.get("Region"), fields.get("Scene")))
        if key is None or key not in self.authoring:
            raise AuthoringError(f"no authoring entry for scene {fields.get('Scene')!r}")
        return self.authoring[key], fields

    @staticmethod
    def _find(lines: dict[str, str], fragment: str) -> str:
        hits = [sid for sid, text in lines.items() if fragment in text]
        if len(hits) != 1:
            raise AuthoringError(f"fragment {fragment!r} matched {hits} in {sorted(lines)}")
        return hits[0]

    def _respond(self, messages) -> str:
        system, user = messages[0]["content"], messages[-1]["content"]
        entry, fields = self._entry(user)
        if system == self._query_system:
            return entry["query"]
        if "Retrieved rules:" in user:
            lines = {}
            for line in user.split("Retrieved rules:", 1)[1].splitlines():
                m = _FILTER_LINE.match(line)
                if m:
                    lines[m.group(1)] = m.group(2)
            rules = [{"sent_id": self._find(lines, r["match"]), "kind": r["kind"],
                      "rationale": r["rationale"]} for r in entry["rules"]]
            return json.dumps({"applicable_rules": rules})
        lines = {}
        for line in user.split("Applicable rules:", 1)[1].splitlines():
            m = _JUDGE_LINE.match(line)
            if m:
                lines[m.group(1)] = m.group(2)
        token = fields["Action under review"].split(" ", 1)[0]
        if not lines:
            return json.dumps({"violated_mandatory": [], "violated_guidelines": [],
                               "explanation": "No rules were provided, so no violation can be cited."})
        spec = entry["verdicts"][token]
        mandatory = [self._find(lines, f) for f in spec["mandatory"]]
        guidelines = [self._find(lines, f) for f in spec["guidelines"]]
        cited = mandatory + guidelines
        explanation = spec["explanation"]
        explanation += (f" Violated: {', '.join(cited)}." if cited else " No applicable rule is violated.")
        return json.dumps({"violated_mandatory": mandatory, "violated_guidelines": guidelines,
                           "explanation": explanation})

    def exchange(self, messages) -> ChatExchange:
        return ChatExchange(tuple(messages), self._respond(messages), self.backend_id, 0)


def record_region(region: str, authoring: dict) -> list[dict]:
    corpus = load_corpus(FIXTURES / "corpora" / region)
    cases = [c for name in SUITES[region] for c in load_suite(FIXTURES / "suites" / name).cases]
    embedder = LocalEmbedder()
    index = build_index(corpus, embedder, built_at="fixture")
    recorder = RecordingChat(AuthoringChat(authoring, cases))
    pipeline = Pipeline(
        backends=Backends(chat_reasoning=recorder, embed_stage1=embedder, chat_query=recorder),
        corpus=corpus, index=index, params=RetrievalParams())
    for case in cases:
        for mode in (Mode.WITH_TRR, Mode.BASELINE):
            pipeline.decide(case, mode=mode)
    unique = {}
    for rec in recorder.records:
        unique.setdefault(rec["digest"], rec)
    return sorted(unique.values(), key=lambda r: r["digest"])


def render(records: list[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--check", action="store_true", help="compare instead of writing")
    args = parser.parse_args(argv)
    authoring = json.loads((FIXTURES / "authoring.json").read_text(encoding="utf-8"))
    stale = []
    for region in SUITES:
        text = render(record_region(region, authoring))
        path = FIXTURES / "chat" / f"{region}.jsonl"
        if args.check:
            if not path.is_file() or path.read_text(encoding="utf-8") != text:
                stale.append(str(path))
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
            print(f"wrote {path} ({text.count(chr(10))} records)")
    if stale:
        print("stale fixtures: " + ", ".join(stale), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
