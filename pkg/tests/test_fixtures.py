"""The recorded chat fixtures must stay in sync with prompts, corpora and scenarios."""

import importlib.util
import json

from conftest import FIXTURES, ROOT
from regpilot.providers import messages_digest


def load_script(name):
    spec = importlib.util.spec_from_file_location(name, ROOT / "scripts" / f"{name}.py")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_recorded_fixtures_are_current(capsys):
    assert load_script("record_fixtures").main(["--check"]) == 0


def test_fixture_records_are_self_consistent():
    for path in (FIXTURES / "chat").glob("*.jsonl"):
        digests = []
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            assert rec["digest"] == messages_digest(rec["messages"])
            digests.append(rec["digest"])
        assert digests == sorted(set(digests))
