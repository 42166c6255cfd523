"""Assemble corpus, index and backends from an AppConfig."""

from __future__ import annotations

from dataclasses import dataclass

from .config import AppConfig
from .corpus import Corpus, load_corpus
from .errors import ConfigError
from .providers import CachedEmbedder, EmbeddingCache, make_backend
from .reasoning import Backends, Mode, Pipeline
from .retrieval import ParagraphIndex, load_index


def make_embedder(config: AppConfig, role: str, cache: EmbeddingCache | None = None):
    if not config.backends[role].is_embed:
        raise ConfigError(f"backend for role {role!r} must be an embedding backend")
    return CachedEmbedder(make_backend(config.backends[role], config.base_dir), cache)


def make_backends(config: AppConfig, mode: Mode) -> Backends:
    config.require_roles("chat_reasoning")
    cache = None
    if mode is Mode.WITH_TRR:
        config.require_roles("embed_stage1")
        cache = EmbeddingCache(config.cache_path if config.cache_path.exists() else None)
    chat = make_backend(config.backends["chat_reasoning"], config.base_dir)
    if config.backends["chat_reasoning"].is_embed:
        raise ConfigError("backend for role 'chat_reasoning' must be a chat backend")
    backends = Backends(chat_reasoning=chat)
    if mode is Mode.WITH_TRR:
        backends.embed_stage1 = make_embedder(config, "embed_stage1", cache)
        if "embed_stage2" in config.backends:
            backends.embed_stage2 = make_embedder(config, "embed_stage2", cache)
        if "chat_query" in config.backends:
            backends.chat_query = make_backend(config.backends["chat_query"], config.base_dir)
    return backends


def load_region_corpus(config: AppConfig) -> Corpus:
    config.require_path(config.corpus_dir, "dir")
    return load_corpus(config.corpus_dir).region_view(config.region)


@dataclass
class Runtime:
    config: AppConfig
    corpus: Corpus | None
    index: ParagraphIndex | None
    pipeline: Pipeline

    def index_fresh(self) -> bool:
        return (self.index is not None and self.corpus is not None
                and self.index.corpus_digest == self.corpus.digest())


def load_runtime(config: AppConfig) -> Runtime:
    mode = config.mode
    corpus = index = None
    if mode is Mode.WITH_TRR:
        corpus = load_region_corpus(config)
        config.require_path(config.index_path, "file")
        index = load_index(config.index_path)
    pipeline = Pipeline(
        backends=make_backends(config, mode),
        corpus=corpus,
        index=index,
        params=config.retrieval,
        mode=mode,
        include_lane_changes=config.include_lane_changes,
    )
    return Runtime(config, corpus, index, pipeline)
