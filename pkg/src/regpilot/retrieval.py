"""Cascading paragraph -> sentence retrieval over a regulation corpus.

Stage 1 scores every indexed paragraph against the query, keeps those at or
above ``paragraph_threshold`` and caps them at ``k_paragraphs``.  Stage 2
embeds every sentence of the surviving paragraphs and returns the best
``k_sentences``.  Scores are cosine similarities of unit vectors, summed with
``math.fsum`` so they do not depend on summation order.  Ties are broken by
(doc_id, section, paragraph, sentence) ascending.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .corpus import Corpus, SourceTier, normalize_for_embedding, segment_sentences
from .errors import (CorruptIndexError, InputError, InvariantError, MigrationError,
                     StaleIndexError)
from .providers.embedding import CachedEmbedder, EmbeddingCache

log = logging.getLogger(__name__)

INDEX_MAGIC = b"RPIX"
INDEX_VERSION = 1
_HEADER_FIXED = struct.Struct("<4sH")


@dataclass(frozen=True)
class RetrievalParams:
    paragraph_threshold: float = 0.28
    k_paragraphs: int = 20
    k_sentences: int = 5

    def __post_init__(self):
        if not math.isfinite(self.paragraph_threshold):
            raise InputError("paragraph_threshold must be finite")
        if self.k_paragraphs < 1 or self.k_sentences < 1:
            raise InputError("k_paragraphs and k_sentences must be positive")

    def to_dict(self) -> dict:
        return {
            "paragraph_threshold": self.paragraph_threshold,
            "k_paragraphs": self.k_paragraphs,
            "k_sentences": self.k_sentences,
        }


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum((a * b).tolist())


class ParagraphIndex:
    def __init__(self, para_ids, vectors: np.ndarray, backend_id: str, corpus_digest: str,
                 built_at: str, region: str = ""):
        self.para_ids = tuple(para_ids)
        vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.para_ids):
            raise InputError("index vectors do not match the id list")
        vectors.setflags(write=False)
        self.vectors = vectors
        self.backend_id = backend_id
        self.corpus_digest = corpus_digest
        self.built_at = built_at
        self.region = region

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.para_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParagraphIndex):
            return NotImplemented
        return (
            self.para_ids == other.para_ids
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
            and (self.backend_id, self.corpus_digest, self.built_at, self.region)
            == (other.backend_id, other.corpus_digest, other.built_at, other.region)
        )

    def check_fresh(self, corpus: Corpus) -> None:
        digest = corpus.digest()
        if digest != self.corpus_digest:
            raise StaleIndexError(
                f"index was built from corpus digest {self.corpus_digest[:12]} but the corpus "
                f"is now {digest[:12]}; rebuild the index (regpilot index)"
            )


def build_index(corpus: Corpus, embedder, cache: EmbeddingCache | None = None,
                built_at: str | None = None) -> ParagraphIndex:
    refs = list(corpus.paragraph_refs())
    if not refs:
        raise InputError("corpus has no paragraphs to index")
    if cache is not None and not isinstance(embedder, CachedEmbedder):
        embedder = CachedEmbedder(embedder, cache)
    vectors = []
    try:
        for ref in refs:
            text = ref.paragraph.embedding_text()
            try:
                vectors.append(embedder.embed(text))
            except InputError as exc:
                raise InputError(f"paragraph {ref.paragraph.para_id}: {exc}") from exc
    finally:
        if cache is not None and cache.path is not None:
            cache.save()
    return ParagraphIndex(
        [r.paragraph.para_id for r in refs],
        np.vstack(vectors),
        embedder.backend_id,
        corpus.digest(),
        built_at or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        ",".join(corpus.regions()),
    )


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if pos + n > len(buf):
        raise struct.error("string runs past end of buffer")
    return buf[pos:pos + n].decode("utf-8"), pos + n


def persist_index(index: ParagraphIndex, path: str | Path) -> None:
    """Write the index as a versioned binary container.

    Layout (little-endian): magic ``RPIX``, u16 version, length-prefixed
    backend id / region / built_at / corpus digest, u32 dimension, u32 entry
    count, 32-byte SHA-256 of the body.  Body: one record per entry (u32
    offset into the id table, then ``dimension`` float64 values) followed by
    the id table of length-prefixed UTF-8 ids.
    """
    id_table = bytearray()
    records = bytearray()
    for i, para_id in enumerate(index.para_ids):
        records += struct.pack("<I", len(id_table))
        records += index.vectors[i].astype("<f8").tobytes()
        id_table += _pack_str(para_id)
    body = bytes(records) + bytes(id_table)
    header = (
        _HEADER_FIXED.pack(INDEX_MAGIC, INDEX_VERSION)
        + _pack_str(index.backend_id)
        + _pack_str(index.region)
        + _pack_str(index.built_at)
        + _pack_str(index.corpus_digest)
        + struct.pack("<II", index.dimension, len(index))
        + hashlib.sha256(body).digest()
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)


def load_index(path: str | Path) -> ParagraphIndex:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"index file not found: {path}")
    buf = path.read_bytes()
    try:
        magic, version = _HEADER_FIXED.unpack_from(buf, 0)
        if magic != INDEX_MAGIC:
            raise CorruptIndexError(f"{path} is not an index file (bad magic)")
        if version != INDEX_VERSION:
            raise MigrationError(version, INDEX_VERSION)
        pos = _HEADER_FIXED.size
        backend_id, pos = _unpack_str(buf, pos)
        region, pos = _unpack_str(buf, pos)
        built_at, pos = _unpack_str(buf, pos)
        corpus_digest, pos = _unpack_str(buf, pos)
        dimension, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        checksum = buf[pos:pos + 32]
        pos += 32
        body = buf[pos:]
        if len(checksum) != 32 or hashlib.sha256(body).digest() != checksum:
            raise CorruptIndexError(f"{path}: checksum mismatch (truncated or modified file)")
        rec_size = 4 + 8 * dimension
        table_start = rec_size * count
        ids, vectors = [], np.empty((count, dimension), dtype=np.float64)
        for i in range(count):
            (offset,) = struct.unpack_from("<I", body, i * rec_size)
            vectors[i] = np.frombuffer(body, dtype="<f8", count=dimension, offset=i * rec_size + 4)
            para_id, _ = _unpack_str(body, table_start + offset)
            ids.append(para_id)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CorruptIndexError(f"{path}: unreadable index ({exc})") from exc
    return ParagraphIndex(ids, vectors, backend_id, corpus_digest, built_at, region)


@dataclass(frozen=True)
class ScoredSentence:
    sent_id: str
    para_id: str
    doc_id: str
    text: str
    score: float
    tier: SourceTier
    header_path: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "sent_id": self.sent_id,
            "para_id": self.para_id,
            "doc_id": self.doc_id,
            "tier": self.tier.value,
            "header_path": list(self.header_path),
            "score": self.score,
            "text": self.text,
        }


@dataclass(frozen=True)
class RestoredFigure:
    doc_id: str
    para_id: str
    fig_id: str
    caption_text: str
    source_ref: str

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "para_id": self.para_id,
            "fig_id": self.fig_id,
            "caption_text": self.caption_text,
            "source_ref": self.source_ref,
        }


@dataclass(frozen=True)
class RetrievalResult:
    sentences: tuple[ScoredSentence, ...]
    figures: tuple[RestoredFigure, ...]
    query_text: str
    params_used: RetrievalParams
    paragraph_candidates: tuple[tuple[str, float], ...]
    warnings: tuple[str, ...] = field(default=())

    @classmethod
    def empty(cls, query_text: str = "", params: RetrievalParams | None = None) -> "RetrievalResult":
        return cls((), (), query_text, params or RetrievalParams(), ())

    def sent_ids(self) -> list[str]:
        return [s.sent_id for s in self.sentences]

    def to_dict(self) -> dict:
        return {
            "query_text": self.query_text,
            "params_used": self.params_used.to_dict(),
            "sentences": [s.to_dict() for s in self.sentences],
            "figures": [f.to_dict() for f in self.figures],
            "paragraph_candidates": [[pid, score] for pid, score in self.paragraph_candidates],
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)


def truncate_query(text: str, limit: int | None) -> tuple[str, str | None]:
    """Cut ``text`` to at most ``limit`` chars, preferring a sentence boundary."""
    if limit is None or len(text) <= limit:
        return text, None
    cut = 0
    for _, end in segment_sentences(text):
        if end > limit:
            break
        cut = end
    if cut == 0:
        cut = text.rfind(" ", 0, limit + 1)
        cut = cut if cut > 0 else limit
    truncated = text[:cut].rstrip()
    return truncated, f"query truncated from {len(text)} to {len(truncated)} characters"


def _embed_all(embedder, texts: list[str]) -> list:
    """Embed in input order; texts the backend rejects as empty map to None."""

    def _one(text):
        try:
            return embedder.embed(text)
        except InputError:
            return None

    workers = min(getattr(embedder, "max_in_flight", 1) or 1, len(texts))
    if workers <= 1:
        return [_one(t) for t in texts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, texts))


def retrieve(query, index: ParagraphIndex, corpus: Corpus, params: RetrievalParams | None,
             embedder, stage2_embedder=None) -> RetrievalResult:
    """Run the two-stage cascade for ``query`` (a string or RetrievalQuery)."""
    params = params or RetrievalParams()
    query_text = getattr(query, "text", query)
    if not query_text or not query_text.strip():
        raise InputError("retrieval query text is empty")
    index.check_fresh(corpus)
    if embedder.backend_id != index.backend_id:
        raise InvariantError(
            f"index was built with backend {index.backend_id!r}, query embedder is "
            f"{embedder.backend_id!r}; rebuild the index"
        )
    stage2 = stage2_embedder or embedder
    warnings = []
    text, note = truncate_query(query_text, getattr(embedder, "max_input_chars", None))
    if note:
        warnings.append(note)
        log.warning(note)
    qv = embedder.embed(normalize_for_embedding(text))

    scored = []
    for para_id, vec in zip(index.para_ids, index.vectors):
        score = cosine(vec, qv)
        if score >= params.paragraph_threshold:
            ref = corpus.paragraph(para_id)
            scored.append((-score, ref.position, para_id, ref))
    scored.sort(key=lambda t: (t[0], t[1]))
    kept = scored[: params.k_paragraphs]
    candidates = tuple((pid, -neg) for neg, _, pid, _ in kept)
    if not kept:
        return RetrievalResult((), (), query_text, params, candidates, tuple(warnings))

    if stage2 is embedder:
        qv2 = qv
    else:
        text2, note2 = truncate_query(query_text, getattr(stage2, "max_input_chars", None))
        if note2:
            warnings.append(note2)
        qv2 = stage2.embed(normalize_for_embedding(text2))

    pool = []
    for _, position, _, ref in sorted(kept, key=lambda t: t[1]):
        para = ref.paragraph
        for ti, sent in enumerate(para.sentences):
            pool.append((position + (ti,), ref, sent, normalize_for_embedding(sent.text, para.figure_labels)))
    vectors = _embed_all(stage2, [item[3] for item in pool])
    ranked = []
    for (key, ref, sent, _), vec in zip(pool, vectors):
        if vec is None:
            warnings.append(f"sentence {sent.sent_id} has no embeddable text; skipped")
            continue
        ranked.append((-cosine(vec, qv2), key, ref, sent))
    ranked.sort(key=lambda t: (t[0], t[1]))
    ranked = ranked[: params.k_sentences]

    sentences, figures, seen = [], [], set()
    for neg, _, ref, sent in ranked:
        para = ref.paragraph
        sentences.append(ScoredSentence(
            sent.sent_id, para.para_id, ref.doc.doc_id, sent.text, -neg, ref.doc.tier,
            ref.section.header_path,
        ))
        for fig in para.figure_labels:
            key = (ref.doc.doc_id, fig.fig_id)
            if key not in seen:
                seen.add(key)
                figures.append(RestoredFigure(ref.doc.doc_id, para.para_id, fig.fig_id,
                                              fig.caption_text, fig.source_ref))
    return RetrievalResult(tuple(sentences), tuple(figures), query_text, params, candidates,
                           tuple(warnings))
