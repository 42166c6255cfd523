"""Application configuration: a TOML (or JSON) file plus REGPILOT_* overrides.

Nested keys are addressed in environment variables with a double
underscore, e.g. ``REGPILOT_RETRIEVAL__K_SENTENCES=3`` or
``REGPILOT_BACKENDS__CHAT_REASONING__FIXTURE_PATH=...``.  Relative paths
resolve against the directory of the config file.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .providers import BackendConfig
from .reasoning import Mode
from .retrieval import RetrievalParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "REGPILOT_"
ROLES = ("embed_stage1", "embed_stage2", "chat_reasoning", "chat_query")


@dataclass
class AppConfig:
    region: str
    corpus_dir: Path
    index_path: Path
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    backends: dict[str, BackendConfig] = field(default_factory=dict)
    mode: Mode = Mode.WITH_TRR
    verbosity: str = "full"
    worker_limit: int = 4
    include_lane_changes: bool = True
    base_dir: Path = Path(".")

    @property
    def cache_path(self) -> Path:
        return self.index_path.with_name(self.index_path.name + ".cache.jsonl")

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "corpus_dir": str(self.corpus_dir),
            "index_path": str(self.index_path),
            "mode": self.mode.value,
            "verbosity": self.verbosity,
            "worker_limit": self.worker_limit,
            "include_lane_changes": self.include_lane_changes,
            "retrieval": self.retrieval.to_dict(),
            "backends": {role: _backend_dict(cfg) for role, cfg in sorted(self.backends.items())},
        }

    def require_roles(self, *roles: str) -> None:
        for role in roles:
            if role not in self.backends:
                raise ConfigError(f"config has no backend for role {role!r}")

    def require_path(self, path: Path, kind: str = "file") -> None:
        ok = path.is_dir() if kind == "dir" else path.is_file()
        if not ok:
            raise ConfigError(f"{kind} not found: {path}", path=str(path))


def _backend_dict(cfg: BackendConfig) -> dict:
    d = {k: v for k, v in cfg.to_dict().items() if v not in (None, {})}
    return d


def _coerce(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_env(data: dict, env) -> dict:
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = name[len(ENV_PREFIX):].lower().split("__")
        target = data
        for key in keys[:-1]:
            target = target.setdefault(key, {})
            if not isinstance(target, dict):
                raise ConfigError(f"{name}: {key!r} is not a table")
        target[keys[-1]] = _coerce(raw)
    return data


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return (p if p.is_absolute() else base / p).resolve()


def config_from_dict(data: dict, base_dir: str | Path = ".") -> AppConfig:
    base = Path(base_dir)
    known = {"region", "corpus_dir", "index_path", "retrieval", "backends", "mode", "verbosity",
             "worker_limit", "include_lane_changes"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("region", "corpus_dir", "index_path"):
        if not data.get(key):
            raise ConfigError(f"config needs {key!r}")
    try:
        retrieval = RetrievalParams(**data.get("retrieval", {}))
    except TypeError as exc:
        raise ConfigError(f"bad [retrieval] table: {exc}") from None
    backends = {}
    for role, raw in data.get("backends", {}).items():
        if role not in ROLES:
            raise ConfigError(f"unknown backend role {role!r} (expected one of {ROLES})")
        raw = dict(raw)
        if raw.get("fixture_path"):
            raw["fixture_path"] = str(_resolve(base, raw["fixture_path"]))
        backends[role] = BackendConfig.from_dict(raw)
    try:
        mode = Mode(data.get("mode", "with_trr"))
    except ValueError:
        raise ConfigError(f"mode must be with_trr or baseline, got {data.get('mode')!r}") from None
    verbosity = data.get("verbosity", "full")
    if verbosity not in ("full", "terse"):
        raise ConfigError(f"verbosity must be full or terse, got {verbosity!r}")
    worker_limit = int(data.get("worker_limit", 4))
    if worker_limit < 1:
        raise ConfigError("worker_limit must be positive")
    return AppConfig(
        region=str(data["region"]),
        corpus_dir=_resolve(base, data["corpus_dir"]),
        index_path=_resolve(base, data["index_path"]),
        retrieval=retrieval,
        backends=backends,
        mode=mode,
        verbosity=verbosity,
        worker_limit=worker_limit,
        include_lane_changes=bool(data.get("include_lane_changes", True)),
        base_dir=base,
    )


def load_config(path: str | Path, env=None, overrides: dict | None = None) -> AppConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", path=str(path))
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}", path=str(path)) from exc
    apply_env(data, os.environ if env is None else env)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return config_from_dict(data, path.parent)
