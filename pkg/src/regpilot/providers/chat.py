"""Chat completion backends: remote wire client, scripted replay, recorder."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from ..errors import FixtureMissError, InputError, TransportError
from .http import JsonPoster, dig

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatExchange:
    request: tuple[dict, ...]
    response_text: str
    backend_id: str
    latency_ms: int


def check_messages(messages) -> list[dict]:
    messages = [{"role": m["role"], "content": m["content"]} for m in messages]
    if not messages:
        raise InputError("chat request needs at least one message")
    if messages[0]["role"] not in ("system", "user"):
        raise InputError("first chat message must have role system or user")
    for m in messages:
        if m["role"] not in ROLES:
            raise InputError(f"unknown chat role {m['role']!r}")
    return messages


def messages_digest(messages) -> str:
    """SHA-256 over the canonical JSON form of the role/content pairs."""
    canon = json.dumps(check_messages(messages), ensure_ascii=False, separators=(",", ":"),
                       sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class ChatBackend:
    backend_id = "chat"

    def exchange(self, messages) -> ChatExchange:
        raise NotImplementedError

    def chat(self, messages) -> str:
        return self.exchange(messages).response_text


class ScriptedChat(ChatBackend):
    """Replays recorded responses.

    Fixture records are JSON objects with ``response`` and, for digest mode,
    ``digest``.  Optional fields: ``latency_ms``, ``backend_id`` (reported in
    place of the scripted id, so replays reproduce recorded traces) and
    ``error`` (``{"status": 503}`` raises a transport error instead).
    """

    def __init__(self, records: list[dict], mode: str = "digest", backend_id: str = "scripted"):
        if mode not in ("digest", "sequence"):
            raise InputError(f"unknown scripted mode {mode!r}")
        self.mode = mode
        self.backend_id = backend_id
        self.records = list(records)
        self._by_digest: dict[str, dict] = {}
        for rec in self.records:
            if mode == "digest":
                if "digest" not in rec:
                    raise InputError("digest-mode fixture record without 'digest'")
                self._by_digest.setdefault(rec["digest"], rec)
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, mode: str = "digest") -> "ScriptedChat":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"fixture file not found: {path}")
        records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()
                   if line.strip()]
        return cls(records, mode=mode, backend_id=f"scripted:{path.name}")

    def _next(self, digest: str) -> dict:
        if self.mode == "digest":
            rec = self._by_digest.get(digest)
            if rec is None:
                raise FixtureMissError(f"no fixture for request digest {digest}", digest)
            return rec
        with self._lock:
            if self._cursor >= len(self.records):
                raise FixtureMissError(
                    f"fixture sequence exhausted after {len(self.records)} entries "
                    f"(request digest {digest})", digest)
            rec = self.records[self._cursor]
            self._cursor += 1
            return rec

    def exchange(self, messages) -> ChatExchange:
        messages = check_messages(messages)
        rec = self._next(messages_digest(messages))
        if rec.get("error"):
            err = rec["error"]
            raise TransportError(err.get("message", "scripted transport failure"), err.get("status"))
        return ChatExchange(tuple(messages), rec["response"], rec.get("backend_id", self.backend_id),
                            int(rec.get("latency_ms", 0)))


class RemoteChat(ChatBackend):
    def __init__(self, endpoint_url: str, model_identifier: str | None = None,
                 api_key_env: str | None = None, field_map: dict | None = None,
                 max_in_flight: int = 8, timeout_s: float = 60.0, temperature: float | None = 0.0,
                 transport: httpx.BaseTransport | None = None, sleep=None):
        fm = {"messages": "messages", "model": "model", "response": "choices.0.message.content"}
        fm.update(field_map or {})
        self.field_map = fm
        self.model_identifier = model_identifier
        self.temperature = temperature
        self.backend_id = f"remote:{model_identifier or endpoint_url}"
        kwargs = {"sleep": sleep} if sleep else {}
        self._poster = JsonPoster(endpoint_url, api_key_env, timeout_s, transport, **kwargs)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def exchange(self, messages) -> ChatExchange:
        messages = check_messages(messages)
        body: dict = {self.field_map["messages"]: messages}
        if self.model_identifier:
            body[self.field_map["model"]] = self.model_identifier
        if self.temperature is not None:
            body["temperature"] = self.temperature
        start = time.monotonic()
        with self._slots:
            payload = self._poster.post(body)
        latency = int((time.monotonic() - start) * 1000)
        try:
            text = dig(payload, self.field_map["response"])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"response text not found at {self.field_map['response']!r}") from exc
        if not isinstance(text, str):
            raise TransportError("response text is not a string")
        return ChatExchange(tuple(messages), text, self.backend_id, latency)


class RecordingChat(ChatBackend):
    """Pass-through that records every exchange as a digest-mode fixture."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def exchange(self, messages) -> ChatExchange:
        ex = self.inner.exchange(messages)
        rec = {
            "digest": messages_digest(ex.request),
            "backend_id": ex.backend_id,
            "latency_ms": ex.latency_ms,
            "response": ex.response_text,
            "messages": list(ex.request),
        }
        with self._lock:
            self.records.append(rec)
        return ex

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def chat(messages, backend: ChatBackend) -> str:
    return backend.chat(messages)
