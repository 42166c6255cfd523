"""JSON-over-HTTP POST with bounded retries."""

from __future__ import annotations

import logging
import os
import time
from typing import Any, Callable

import httpx

from ..errors import TransportError

log = logging.getLogger(__name__)

ATTEMPTS = 3
BACKOFF_BASE_S = 0.25


def _retryable(status: int) -> bool:
    return status == 429 or 500 <= status < 600


def dig(payload: Any, path: str) -> Any:
    """Follow a dotted path such as ``choices.0.message.content``."""
    cur = payload
    for part in path.split("."):
        if isinstance(cur, list):
            cur = cur[int(part)]
        else:
            cur = cur[part]
    return cur


class JsonPoster:
    def __init__(self, url: str, api_key_env: str | None = None, timeout_s: float = 30.0,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.url = url
        self.api_key_env = api_key_env
        self.sleep = sleep
        self.client = httpx.Client(timeout=timeout_s, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise TransportError(f"environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def post(self, body: dict) -> Any:
        last: TransportError | None = None
        for attempt in range(ATTEMPTS):
            if attempt:
                self.sleep(BACKOFF_BASE_S * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.url, json=body, headers=self._headers())
            except httpx.TimeoutException as exc:
                last = TransportError(f"timeout calling {self.url}: {exc}")
                continue
            except httpx.HTTPError as exc:
                raise TransportError(f"error calling {self.url}: {exc}") from exc
            if resp.status_code < 300:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise TransportError(f"non-JSON response from {self.url}", resp.status_code) from exc
            last = TransportError(
                f"HTTP {resp.status_code} from {self.url}: {resp.text[:200]}", resp.status_code
            )
            if not _retryable(resp.status_code):
                raise last
            log.warning("retryable failure (attempt %d/%d): %s", attempt + 1, ATTEMPTS, last)
        assert last is not None
        raise TransportError(f"giving up after {ATTEMPTS} attempts: {last}", last.status)
