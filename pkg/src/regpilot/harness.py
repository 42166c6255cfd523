"""Benchmark runner: scenario-action pair accuracy and decision accuracy.

A pair (case, action) is correct only when both the compliant and the safe
flag match the ground truth.  A case is correct when the selected action set
equals the ground-truth set of compliant-and-safe actions.  Cases whose run
raised an error count as wrong on every pair.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .errors import InputError, RegpilotError, ScenarioError
from .reasoning import DecisionOutput, Mode, Pipeline
from .scenario import ScenarioCase, scenario_from_dict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkSuite:
    suite_id: str
    region: str
    cases: tuple[ScenarioCase, ...]

    def __post_init__(self):
        seen = set()
        for case in self.cases:
            if case.ground_truth is None:
                raise ScenarioError(f"suite {self.suite_id}: case {case.case_id} lacks ground_truth",
                                    field="ground_truth")
            if case.case_id in seen:
                raise ScenarioError(f"suite {self.suite_id}: duplicate case_id {case.case_id!r}",
                                    field="case_id")
            seen.add(case.case_id)


def load_suite(path: str | Path, include_lane_changes: bool = True) -> BenchmarkSuite:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"suite file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, list):
        raise ScenarioError(f"{path}: a suite file is a JSON array of scenarios")
    cases = tuple(scenario_from_dict(item, include_lane_changes) for item in data)
    regions = sorted({c.region for c in cases})
    return BenchmarkSuite(path.stem, regions[0] if len(regions) == 1 else "mixed", cases)


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    passed: bool
    pair_total: int
    pair_correct: int
    mismatches: tuple[str, ...]
    selected: tuple[str, ...] = ()
    expected: tuple[str, ...] = ()
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "pass": self.passed,
            "pair_total": self.pair_total,
            "pair_correct": self.pair_correct,
            "mismatches": list(self.mismatches),
            "selected": list(self.selected),
            "expected": list(self.expected),
            "error": self.error,
        }


@dataclass(frozen=True)
class Metrics:
    suite_id: str
    mode: str
    pair_total: int
    pair_correct: int
    case_total: int
    case_correct: int
    pair_accuracy: float
    decision_accuracy: float
    per_case: tuple[CaseResult, ...]

    @classmethod
    def from_cases(cls, suite_id: str, mode: str, per_case) -> "Metrics":
        per_case = tuple(per_case)
        pair_total = sum(c.pair_total for c in per_case)
        pair_correct = sum(c.pair_correct for c in per_case)
        case_correct = sum(c.passed for c in per_case)
        if pair_total == 0 or not per_case:
            raise InputError("accuracy is undefined for zero pairs")
        return cls(suite_id, mode, pair_total, pair_correct, len(per_case), case_correct,
                   pair_correct / pair_total, case_correct / len(per_case), per_case)

    def totals(self) -> tuple:
        """Everything except the per-case ordering."""
        return (self.suite_id, self.mode, self.pair_total, self.pair_correct, self.case_total,
                self.case_correct, self.pair_accuracy, self.decision_accuracy,
                tuple(sorted(self.per_case, key=lambda c: c.case_id)))

    def to_dict(self) -> dict:
        return {
            "suite_id": self.suite_id,
            "mode": self.mode,
            "pair_total": self.pair_total,
            "pair_correct": self.pair_correct,
            "case_total": self.case_total,
            "case_correct": self.case_correct,
            "pair_accuracy": self.pair_accuracy,
            "decision_accuracy": self.decision_accuracy,
            "per_case": [c.to_dict() for c in self.per_case],
        }


def score_case(case: ScenarioCase, output: DecisionOutput | None, error: str | None = None,
               include_lane_changes: bool = True) -> CaseResult:
    actions = case.action_set(include_lane_changes)
    expected = tuple(a.token for a in case.expected_selection(include_lane_changes))
    if output is None:
        return CaseResult(case.case_id, False, len(actions), 0,
                          tuple(f"{a.token}: no verdict" for a in actions), (), expected,
                          error or "no output")
    verdicts = {v.action: v for v in output.verdicts}
    correct, mismatches = 0, []
    for action in actions:
        want_c, want_s = case.ground_truth[action]
        v = verdicts.get(action)
        if v is None:
            mismatches.append(f"{action.token}: no verdict")
            continue
        if (v.compliant, v.safe) == (want_c, want_s):
            correct += 1
        else:
            mismatches.append(
                f"{action.token}: expected compliant={want_c} safe={want_s}, "
                f"got compliant={v.compliant} safe={v.safe}")
    selected = tuple(a.token for a in output.selected_actions)
    return CaseResult(case.case_id, set(selected) == set(expected), len(actions), correct,
                      tuple(mismatches), selected, expected)


def evaluate(suite: BenchmarkSuite, pipeline: Pipeline, mode: Mode | str | None = None,
             workers: int = 1) -> Metrics:
    if not suite.cases:
        raise InputError(f"suite {suite.suite_id} has no cases")
    mode = Mode(mode) if mode is not None else pipeline.mode

    def _run(case: ScenarioCase) -> CaseResult:
        try:
            out = pipeline.decide(case, mode=mode)
        except RegpilotError as exc:
            log.warning("case %s failed: %s", case.case_id, exc)
            return score_case(case, None, f"{exc.kind}: {exc}", pipeline.include_lane_changes)
        return score_case(case, out, None, pipeline.include_lane_changes)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, suite.cases))
    else:
        results = [_run(c) for c in suite.cases]
    return Metrics.from_cases(suite.suite_id, mode.value, results)


@dataclass(frozen=True)
class Report:
    markdown: str
    data: dict

    def write(self, directory: str | Path, stem: str = "report") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        md, js = directory / f"{stem}.md", directory / f"{stem}.json"
        md.write_text(self.markdown, encoding="utf-8")
        js.write_text(json.dumps(self.data, indent=2) + "\n", encoding="utf-8")
        return md, js


def _pct(x: float) -> str:
    return f"{100 * x:.1f}%"


def report(metrics_with: Metrics, metrics_baseline: Metrics) -> Report:
    """Side-by-side comparison of a retrieval-augmented run and a baseline run."""
    a, b = metrics_with, metrics_baseline
    if a.suite_id != b.suite_id:
        raise InputError(f"metrics come from different suites ({a.suite_id!r} vs {b.suite_id!r})")
    by_a = {c.case_id: c for c in a.per_case}
    by_b = {c.case_id: c for c in b.per_case}
    if set(by_a) != set(by_b):
        raise InputError("metrics cover different case sets")

    rows, disagreements = [], []
    for case_id in [c.case_id for c in a.per_case]:
        ca, cb = by_a[case_id], by_b[case_id]
        differ = ca.passed != cb.passed or set(ca.selected) != set(cb.selected)
        rows.append((case_id, ca, cb, differ))
        if differ:
            disagreements.append(case_id)

    lines = [
        f"# Benchmark report: {a.suite_id}",
        "",
        f"| metric | {a.mode} | {b.mode} |",
        "|---|---|---|",
        f"| scenario-action pairs correct | {a.pair_correct}/{a.pair_total} | {b.pair_correct}/{b.pair_total} |",
        f"| pair accuracy | {_pct(a.pair_accuracy)} | {_pct(b.pair_accuracy)} |",
        f"| decisions correct | {a.case_correct}/{a.case_total} | {b.case_correct}/{b.case_total} |",
        f"| decision accuracy | {_pct(a.decision_accuracy)} | {_pct(b.decision_accuracy)} |",
        "",
        "## Per-case results",
        "",
        f"| case | {a.mode} | {b.mode} | {a.mode} pairs | {b.mode} pairs | disagree |",
        "|---|---|---|---|---|---|",
    ]
    for case_id, ca, cb, differ in rows:
        lines.append(
            f"| {case_id} | {'pass' if ca.passed else 'FAIL'} | {'pass' if cb.passed else 'FAIL'} "
            f"| {ca.pair_correct}/{ca.pair_total} | {cb.pair_correct}/{cb.pair_total} "
            f"| {'yes' if differ else ''} |")
    lines += ["", "## Disagreements", ""]
    if disagreements:
        lines += ["| case | selected (" + a.mode + ") | selected (" + b.mode + ") | expected |",
                  "|---|---|---|---|"]
        for case_id in disagreements:
            ca, cb = by_a[case_id], by_b[case_id]
            lines.append(f"| {case_id} | {', '.join(ca.selected) or '-'} | "
                         f"{', '.join(cb.selected) or '-'} | {', '.join(ca.expected) or '-'} |")
    else:
        lines.append("None: both modes agree on every case.")
    data = {
        "suite_id": a.suite_id,
        "modes": {a.mode: a.to_dict(), b.mode: b.to_dict()},
        "disagreements": disagreements,
    }
    return Report("\n".join(lines) + "\n", data)
