"""Command-line interface.

Exit codes: 0 success, 1 input error, 2 backend/transport error,
3 invariant violation, 4 benchmark below the configured accuracy floor.
Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter

from .config import AppConfig, load_config
from .corpus import SourceTier
from .errors import InputError, RegpilotError
from .harness import evaluate, load_suite, report
from .providers import EmbeddingCache
from .reasoning import Mode
from .retrieval import build_index, persist_index, retrieve
from .runtime import load_region_corpus, load_runtime, make_embedder
from .scenario import load_scenario

log = logging.getLogger("regpilot")

EXIT_BELOW_FLOOR = 4


def _emit(obj) -> None:
    sys.stdout.write((obj if isinstance(obj, str) else json.dumps(obj, indent=2, ensure_ascii=False)) + "\n")


def _event(name: str, **fields) -> None:
    sys.stderr.write(json.dumps({"event": name, **fields}, ensure_ascii=False) + "\n")


def cmd_ingest(config: AppConfig, args) -> int:
    corpus = load_region_corpus(config)
    tiers = Counter(d.tier.value for d in corpus.documents)
    paragraphs = [p for d in corpus.documents for p in d.paragraphs()]
    _emit({
        "region": config.region,
        "documents": len(corpus),
        "by_tier": {t.value: tiers.get(t.value, 0) for t in SourceTier},
        "paragraphs": len(paragraphs),
        "sentences": sum(len(p.sentences) for p in paragraphs),
        "figures": sum(len(p.figure_labels) for p in paragraphs),
        "corpus_digest": corpus.digest(),
        "warnings": list(corpus.warnings),
    })
    return 0


def cmd_index(config: AppConfig, args) -> int:
    config.require_roles("embed_stage1")
    corpus = load_region_corpus(config)
    cache = EmbeddingCache(config.cache_path)
    embedder = make_embedder(config, "embed_stage1", cache)
    index = build_index(corpus, embedder, cache=cache)
    persist_index(index, config.index_path)
    _emit({
        "index_path": str(config.index_path),
        "entries": len(index),
        "dimension": index.dimension,
        "backend_id": index.backend_id,
        "corpus_digest": index.corpus_digest,
        "backend_calls": embedder.calls,
    })
    return 0


def cmd_retrieve(config: AppConfig, args) -> int:
    config.mode = Mode.WITH_TRR
    rt = load_runtime(config)
    b = rt.pipeline.backends
    result = retrieve(args.query, rt.index, rt.corpus, config.retrieval, b.embed_stage1, b.embed_stage2)
    _emit(result.to_json())
    return 0


def cmd_decide(config: AppConfig, args) -> int:
    case = load_scenario(args.scenario, config.include_lane_changes)
    if case.region != config.region:
        raise InputError(f"scenario region {case.region!r} does not match configured region "
                         f"{config.region!r}")
    rt = load_runtime(config)
    out = rt.pipeline.decide(case, request_id=args.request_id)
    _emit(out.to_json(config.verbosity))
    return 0


def cmd_bench(config: AppConfig, args) -> int:
    suite = load_suite(args.suite, config.include_lane_changes)
    config.mode = Mode.WITH_TRR
    rt = load_runtime(config)
    m_with = evaluate(suite, rt.pipeline, Mode.WITH_TRR, workers=config.worker_limit if args.parallel else 1)
    m_base = evaluate(suite, rt.pipeline, Mode.BASELINE, workers=config.worker_limit if args.parallel else 1)
    rep = report(m_with, m_base)
    if args.report_dir:
        md, js = rep.write(args.report_dir, suite.suite_id)
        _event("report_written", markdown=str(md), json=str(js))
    _emit(rep.markdown.rstrip())
    if m_with.decision_accuracy < args.floor:
        _event("below_floor", decision_accuracy=m_with.decision_accuracy, floor=args.floor)
        return EXIT_BELOW_FLOOR
    return 0


def cmd_serve(config: AppConfig, args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(config), host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regpilot", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML or JSON config file")
    common.add_argument("--mode", choices=[m.value for m in Mode])
    common.add_argument("--verbosity", choices=["full", "terse"])
    common.add_argument("--region")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", parents=[common], help="parse the corpus and summarize it")
    sub.add_parser("index", parents=[common], help="build and persist the paragraph index")
    p = sub.add_parser("retrieve", parents=[common], help="run retrieval for a query")
    p.add_argument("query")
    p = sub.add_parser("decide", parents=[common], help="decide one scenario file")
    p.add_argument("scenario")
    p.add_argument("--request-id")
    p = sub.add_parser("bench", parents=[common], help="evaluate a suite with and without retrieval")
    p.add_argument("suite")
    p.add_argument("--floor", type=float, default=0.0,
                   help="exit nonzero if decision accuracy falls below this")
    p.add_argument("--report-dir")
    p.add_argument("--parallel", action="store_true", help="evaluate cases concurrently")
    p = sub.add_parser("serve", parents=[common], help="run the HTTP decision service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "decide": cmd_decide,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, overrides={
            "mode": args.mode, "verbosity": args.verbosity, "region": args.region})
        _event("config", command=args.command, effective_config=config.to_dict())
        return COMMANDS[args.command](config, args)
    except RegpilotError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), ensure_ascii=False) + "\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
