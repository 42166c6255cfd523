"""Embedding and chat backends behind a common configuration record."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from .chat import (ChatBackend, ChatExchange, RecordingChat, RemoteChat, ScriptedChat, chat,
                   messages_digest)
from .embedding import (CachedEmbedder, EmbeddingCache, LocalEmbedder, RemoteEmbedder, embed,
                        fnv1a_64, tokenize)

KINDS = ("remote_embed", "local_embed", "remote_chat", "scripted_chat")


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    endpoint_url: str | None = None
    model_identifier: str | None = None
    api_key_env: str | None = None
    dimension: int = 256
    fixture_path: str | None = None
    fixture_mode: str = "digest"
    field_map: dict = field(default_factory=dict)
    max_in_flight: int = 8
    timeout_s: float = 30.0
    max_input_chars: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind.startswith("remote") and not self.endpoint_url:
            raise ConfigError(f"{self.kind} backend requires endpoint_url")
        if self.kind == "scripted_chat" and not self.fixture_path:
            raise ConfigError("scripted_chat backend requires fixture_path")
        if self.kind.endswith("embed") and self.dimension <= 0:
            raise ConfigError("embedding dimension must be positive")

    @property
    def is_embed(self) -> bool:
        return self.kind.endswith("_embed")

    @classmethod
    def from_dict(cls, data: dict) -> "BackendConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown backend config keys: {sorted(unknown)}")
        if "kind" not in data:
            raise ConfigError("backend config needs 'kind'")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def make_backend(config: BackendConfig, base_dir: str | Path = "."):
    if config.kind == "local_embed":
        return LocalEmbedder(config.dimension)
    if config.kind == "remote_embed":
        return RemoteEmbedder(config.endpoint_url, config.dimension, config.model_identifier,
                              config.api_key_env, config.field_map, config.max_in_flight,
                              config.timeout_s, config.max_input_chars)
    if config.kind == "remote_chat":
        return RemoteChat(config.endpoint_url, config.model_identifier, config.api_key_env,
                          config.field_map, config.max_in_flight, config.timeout_s)
    path = Path(config.fixture_path)
    if not path.is_absolute():
        path = Path(base_dir) / path
    return ScriptedChat.from_file(path, config.fixture_mode)


__all__ = [
    "BackendConfig", "CachedEmbedder", "ChatBackend", "ChatExchange", "EmbeddingCache",
    "LocalEmbedder", "RecordingChat", "RemoteChat", "RemoteEmbedder", "ScriptedChat", "chat",
    "embed", "fnv1a_64", "make_backend", "messages_digest", "tokenize",
]
