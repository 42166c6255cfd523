"""HTTP decision service: POST /v1/decide, GET /v1/health."""

from __future__ import annotations

import json
import logging
import threading
import uuid

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from starlette.concurrency import run_in_threadpool

from .config import AppConfig
from .errors import (InputError, InvariantError, ReasoningFormatError, RegpilotError,
                     StaleIndexError, TransportError)
from .reasoning import PROMPT_VERSION
from .runtime import Runtime, load_runtime
from .scenario import scenario_from_dict

log = logging.getLogger(__name__)


def status_for(exc: RegpilotError) -> int:
    if isinstance(exc, StaleIndexError):
        return 409
    if isinstance(exc, ReasoningFormatError):
        return 422
    if isinstance(exc, TransportError):
        return 502
    if isinstance(exc, InputError):
        return 400
    if isinstance(exc, InvariantError):
        return 500
    return 500


def _error(status: int, exc: RegpilotError, request_id: str) -> JSONResponse:
    body = exc.to_dict()
    body["request_id"] = request_id
    return JSONResponse(body, status_code=status, headers={"X-Request-ID": request_id})


def create_app(config: AppConfig | None = None, runtime: Runtime | None = None) -> FastAPI:
    """Build the app from a config (loads corpus and index now) or a ready runtime."""
    if runtime is None:
        if config is None:
            raise ValueError("create_app needs a config or a runtime")
        runtime = load_runtime(config)
    config = runtime.config
    slots = threading.BoundedSemaphore(config.worker_limit)
    app = FastAPI(title="regpilot", version="0.1.0")
    app.state.runtime = runtime
    log.info("effective config: %s", json.dumps(config.to_dict()))

    @app.get("/v1/health")
    def health():
        rt = app.state.runtime
        fresh = rt.index_fresh() if rt.index is not None else None
        return {
            "status": "stale" if fresh is False else "ok",
            "region": config.region,
            "mode": rt.pipeline.mode.value,
            "corpus_digest": rt.corpus.digest() if rt.corpus is not None else None,
            "index_corpus_digest": rt.index.corpus_digest if rt.index is not None else None,
            "index_fresh": fresh,
            "index_backend": rt.index.backend_id if rt.index is not None else None,
            "index_entries": len(rt.index) if rt.index is not None else None,
            "prompt_version": PROMPT_VERSION,
            "effective_config": config.to_dict(),
        }

    @app.post("/v1/decide")
    async def decide_route(request: Request):
        request_id = request.headers.get("x-request-id") or uuid.uuid4().hex
        raw = await request.body()
        try:
            try:
                data = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise InputError(f"request body is not valid JSON: {exc}") from None
            case = scenario_from_dict(data, config.include_lane_changes)
            if case.region != config.region:
                raise InputError(f"scenario region {case.region!r} is not served here "
                                 f"(region {config.region!r})")
        except RegpilotError as exc:
            return _error(400, exc, request_id)

        def _run():
            with slots:
                return app.state.runtime.pipeline.decide(case, request_id=request_id)

        try:
            out = await run_in_threadpool(_run)
        except RegpilotError as exc:
            log.warning("request %s failed: %s", request_id, exc)
            return _error(status_for(exc), exc, request_id)
        return Response(out.to_json(config.verbosity), media_type="application/json",
                        headers={"X-Request-ID": request_id})

    return app
