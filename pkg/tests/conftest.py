import json
from pathlib import Path

import pytest

from regpilot.corpus import load_corpus
from regpilot.providers import LocalEmbedder
from regpilot.retrieval import build_index

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def embedder():
    return LocalEmbedder()


@pytest.fixture(scope="session")
def boston_corpus():
    return load_corpus(FIXTURES / "corpora" / "boston")


@pytest.fixture(scope="session")
def singapore_corpus():
    return load_corpus(FIXTURES / "corpora" / "singapore")


@pytest.fixture(scope="session")
def boston_index(boston_corpus, embedder):
    return build_index(boston_corpus, embedder, built_at="test")


@pytest.fixture(scope="session")
def singapore_index(singapore_corpus, embedder):
    return build_index(singapore_corpus, embedder, built_at="test")


def write_config(tmp_path: Path, region: str, **extra) -> Path:
    """A JSON config pointing at the shipped fixtures with the index under tmp_path."""
    data = {
        "region": region,
        "corpus_dir": str(FIXTURES / "corpora" / region),
        "index_path": str(tmp_path / f"{region}.rpix"),
        "backends": {
            "embed_stage1": {"kind": "local_embed"},
            "chat_query": {"kind": "scripted_chat", "fixture_path": str(FIXTURES / "chat" / f"{region}.jsonl")},
            "chat_reasoning": {"kind": "scripted_chat", "fixture_path": str(FIXTURES / "chat" / f"{region}.jsonl")},
        },
    }
    data.update(extra)
    path = tmp_path / f"{region}.json"
    path.write_text(json.dumps(data))
    return path
