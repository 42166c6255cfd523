"""Embedding backends.

All backends return unit-norm float64 numpy vectors of their declared
dimension.  ``LocalEmbedder`` is a deterministic hashed bag-of-words model
used for tests and offline runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from pathlib import Path

import httpx
import numpy as np

from ..errors import InputError, TransportError
from .http import JsonPoster, dig

_TOKEN_RE = re.compile(r"[^\W_]+")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _unit(values, dimension: int) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.shape != (dimension,):
        raise TransportError(f"expected embedding of dimension {dimension}, got shape {vec.shape}")
    norm = math.sqrt(math.fsum(float(x) * float(x) for x in vec))
    if norm == 0.0 or not math.isfinite(norm):
        raise TransportError("backend returned a zero or non-finite embedding")
    vec = vec / norm
    vec.setflags(write=False)
    return vec


class LocalEmbedder:
    """Hashed bag-of-words: FNV-1a buckets weighted ``1 + ln(count)``."""

    kind = "local_embed"
    max_input_chars = None

    def __init__(self, dimension: int = 256):
        if dimension <= 0:
            raise InputError("dimension must be positive")
        self.dimension = dimension
        self.backend_id = f"local-fnv1a-{dimension}"

    def bucket(self, token: str) -> int:
        return fnv1a_64(token.encode("utf-8")) % self.dimension

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text) if text else []
        if not tokens:
            raise InputError("cannot embed empty text")
        counts = [0] * self.dimension
        for tok in tokens:
            counts[self.bucket(tok)] += 1
        weights = [1.0 + math.log(c) if c else 0.0 for c in counts]
        return _unit(weights, self.dimension)


class RemoteEmbedder:
    kind = "remote_embed"

    def __init__(self, endpoint_url: str, dimension: int, model_identifier: str | None = None,
                 api_key_env: str | None = None, field_map: dict | None = None,
                 max_in_flight: int = 8, timeout_s: float = 30.0, max_input_chars: int | None = None,
                 transport: httpx.BaseTransport | None = None, sleep=None):
        fm = {"input": "input", "model": "model", "response": "data.0.embedding"}
        fm.update(field_map or {})
        self.field_map = fm
        self.dimension = dimension
        self.model_identifier = model_identifier
        self.max_input_chars = max_input_chars
        self.max_in_flight = max_in_flight
        self.backend_id = f"remote:{model_identifier or endpoint_url}"
        kwargs = {"sleep": sleep} if sleep else {}
        self._poster = JsonPoster(endpoint_url, api_key_env, timeout_s, transport, **kwargs)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise InputError("cannot embed empty text")
        body = {self.field_map["input"]: text}
        if self.model_identifier:
            body[self.field_map["model"]] = self.model_identifier
        with self._slots:
            payload = self._poster.post(body)
        try:
            values = dig(payload, self.field_map["response"])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"embedding not found at {self.field_map['response']!r}") from exc
        return _unit(values, self.dimension)


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Vectors keyed by (backend id, text digest); optionally persisted as JSON lines."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._store: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        vec = np.asarray(rec["vector"], dtype=np.float64)
                        vec.setflags(write=False)
                        self._store[(rec["backend"], rec["digest"])] = vec

    def __len__(self) -> int:
        return len(self._store)

    def get(self, backend_id: str, text: str) -> np.ndarray | None:
        return self._store.get((backend_id, text_digest(text)))

    def put(self, backend_id: str, text: str, vec: np.ndarray) -> None:
        with self._lock:
            self._store[(backend_id, text_digest(text))] = vec

    def save(self, path: str | Path | None = None) -> None:
        target = Path(path) if path else self.path
        if target is None:
            return
        target.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            items = sorted(self._store.items())
        with target.open("w", encoding="utf-8") as fh:
            for (backend, digest), vec in items:
                rec = {"backend": backend, "digest": digest, "vector": [float(x) for x in vec]}
                fh.write(json.dumps(rec) + "\n")


class CachedEmbedder:
    """Cache-aware wrapper; ``calls`` counts requests that reached the backend."""

    def __init__(self, inner, cache: EmbeddingCache | None = None):
        self.inner = inner
        self.cache = cache if cache is not None else EmbeddingCache()
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        return self.inner.backend_id

    @property
    def dimension(self) -> int:
        return self.inner.dimension

    @property
    def max_in_flight(self) -> int:
        return getattr(self.inner, "max_in_flight", 1)

    @property
    def max_input_chars(self):
        return getattr(self.inner, "max_input_chars", None)

    def embed(self, text: str) -> np.ndarray:
        hit = self.cache.get(self.backend_id, text)
        if hit is not None:
            return hit
        vec = self.inner.embed(text)
        with self._lock:
            self.calls += 1
        self.cache.put(self.backend_id, text, vec)
        return vec


def embed(text: str, backend) -> np.ndarray:
    return backend.embed(text)
