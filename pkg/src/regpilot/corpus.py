"""Regulation corpus: parsing, sentence segmentation and addressing.

Source documents are UTF-8 markdown files with a ``---`` delimited
front-matter block carrying ``doc_id``, ``region``, ``tier`` and ``title``.
The body is split into sections by markdown headers and into paragraphs by
blank lines or list items.  Image markers are lifted out of the running text
and replaced by a ``[FIGURE: <fig_id>]`` token at the end of the enclosing
paragraph.

Ids are positional and 1-based::

    para_id = f"{doc_id}-{section}-{paragraph}"
    sent_id = f"{para_id}-{sentence}"
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

from .errors import ConflictError, InputError, ParseError

log = logging.getLogger(__name__)

REQUIRED_KEYS = ("doc_id", "region", "tier", "title")

# A period directly after one of these tokens never ends a sentence.
ABBREVIATIONS = frozenset(
    {
        "U.S.", "U.S.A.", "U.K.", "No.", "Nos.", "Sec.", "Secs.", "Ch.", "Chap.",
        "Art.", "Fig.", "Figs.", "Para.", "Subsec.", "Cl.", "Vol.", "Reg.", "Regs.",
        "Stat.", "Gen.", "Mass.", "Cal.", "App.", "Ct.", "Supp.", "St.", "Ave.",
        "Rd.", "Blvd.", "Hwy.", "Rte.", "Mt.", "Mr.", "Mrs.", "Ms.", "Dr.", "Jr.",
        "Sr.", "Inc.", "Co.", "Corp.", "Ltd.", "vs.", "v.", "e.g.", "i.e.", "cf.",
        "approx.", "min.", "max.",
    }
)

FIGURE_TOKEN_RE = re.compile(r"\[FIGURE: ([^\]\s]+)\]")

_FRONT_MATTER_RE = re.compile(r"\A﻿?---[ \t]*\r?\n(.*?)^---[ \t]*(?:\r?\n|\Z)", re.S | re.M)
_HEADER_RE = re.compile(r"^(#{1,6})[ \t]+(.*?)[ \t]*#*[ \t]*$")
_BULLET_RE = re.compile(r"^[ \t]*[-*+][ \t]+(.*)$")
_ORDERED_RE = re.compile(r"^[ \t]*(\d{1,9}[.)][ \t]+.*)$")
_RULE_RE = re.compile(r"^[ \t]*(?:-{3,}|\*{3,}|_{3,})[ \t]*$")
_IMAGE_RE = re.compile(r'!\[([^\]]*)\]\(\s*<?([^)\s>]*)>?(?:\s+"[^"]*")?\s*\)')
_BOUNDARY_RE = re.compile(r"([.!?]+)[\"')\]]*(?=\s+[\"'(]?[A-Z0-9])")
_ENUMERATOR_RE = re.compile(r"^\(?(?:\d{1,3}|[A-Za-z])[.)]$")
_EMPHASIS_RE = re.compile(r"\*+|`+|(?<!\w)_+|_+(?!\w)")
_WS_RE = re.compile(r"\s+")


class SourceTier(str, Enum):
    STATE_LAW = "state_law"
    STATE_MANUAL = "state_manual"
    CITY_REGULATION = "city_regulation"
    COURT_CASE = "court_case"
    TRAFFIC_NORM = "traffic_norm"

    @classmethod
    def parse(cls, token: str) -> "SourceTier":
        norm = token.strip().lower().replace("-", "_").replace(" ", "_")
        for tier in cls:
            if norm in (tier.value, tier.value.replace("_", "")):
                return tier
        raise ParseError(f"unknown tier {token!r}", key="tier")


@dataclass(frozen=True)
class FigureLabel:
    fig_id: str
    caption_text: str
    source_ref: str


@dataclass(frozen=True)
class Sentence:
    sent_id: str
    text: str
    char_span: tuple[int, int]


@dataclass(frozen=True)
class Paragraph:
    para_id: str
    text: str
    figure_labels: tuple[FigureLabel, ...]
    sentences: tuple[Sentence, ...]

    def embedding_text(self) -> str:
        return normalize_for_embedding(self.text, self.figure_labels)


@dataclass(frozen=True)
class Section:
    header_path: tuple[str, ...]
    paragraphs: tuple[Paragraph, ...]


@dataclass(frozen=True)
class RegulationDocument:
    doc_id: str
    region: str
    tier: SourceTier
    title: str
    sections: tuple[Section, ...]

    def paragraphs(self) -> Iterator[Paragraph]:
        for section in self.sections:
            yield from section.paragraphs


def normalize_for_embedding(text: str, figures: tuple[FigureLabel, ...] = ()) -> str:
    """Collapse whitespace, drop emphasis markers, expand figure tokens to captions."""
    captions = {f.fig_id: f.caption_text for f in figures}

    def _expand(m: re.Match) -> str:
        cap = captions.get(m.group(1))
        return f"Figure: {cap}" if cap and cap != m.group(1) else m.group(0)

    text = FIGURE_TOKEN_RE.sub(_expand, text)
    text = _EMPHASIS_RE.sub("", text)
    return _WS_RE.sub(" ", text).strip()


def segment_sentences(paragraph_text: str) -> list[tuple[int, int]]:
    """Split text into sentence spans ``(start, end)``.

    A boundary is terminal punctuation followed by whitespace and then an
    uppercase letter or digit (optionally behind an opening quote or
    parenthesis).  Tokens in ABBREVIATIONS, and a list enumerator at the very
    start of the text, never end a sentence.  Spans carry no leading or
    trailing whitespace.
    """
    cuts = [0]
    for m in _BOUNDARY_RE.finditer(paragraph_text):
        punct_end = m.end(1)
        token_start = punct_end
        while token_start > 0 and not paragraph_text[token_start - 1].isspace():
            token_start -= 1
        token = paragraph_text[token_start:punct_end].lstrip("\"'(")
        if m.group(1) == "." and token in ABBREVIATIONS:
            continue
        if token_start == _first_non_ws(paragraph_text, 0) and _ENUMERATOR_RE.match(token):
            continue
        cuts.append(m.end())
    cuts.append(len(paragraph_text))

    spans = []
    for a, b in zip(cuts, cuts[1:]):
        start = _first_non_ws(paragraph_text, a)
        end = b
        while end > start and paragraph_text[end - 1].isspace():
            end -= 1
        if end > start:
            spans.append((start, end))
    return spans


def _first_non_ws(text: str, pos: int) -> int:
    while pos < len(text) and text[pos].isspace():
        pos += 1
    return pos


def _split_front_matter(raw: str, source: str | None) -> tuple[dict[str, str], str]:
    m = _FRONT_MATTER_RE.match(raw)
    if not m:
        raise ParseError("missing front-matter block", key="front-matter", source=source)
    meta: dict[str, str] = {}
    for lineno, line in enumerate(m.group(1).splitlines(), start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or not key:
            raise ParseError(f"malformed front-matter line {lineno}: {line!r}", source=source)
        if key in meta:
            raise ParseError(f"duplicate front-matter key {key!r}", key=key, source=source)
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        meta[key] = value
    for key in REQUIRED_KEYS:
        if not meta.get(key):
            raise ParseError(f"missing front-matter key {key!r}", key=key, source=source)
    return meta, raw[m.end():]


class _Builder:
    """Accumulates sections/paragraphs while walking the body lines."""

    def __init__(self, doc_id: str, title: str, source: str | None):
        self.doc_id = doc_id
        self.title = title
        self.source = source
        self.sections: list[tuple[tuple[str, ...], list[tuple[str, list[FigureLabel]]]]] = []
        self.header_stack: list[tuple[int, str]] = []
        self.lines: list[str] = []
        self.fig_count = 0

    def header(self, level: int, text: str) -> None:
        self.flush()
        while self.header_stack and self.header_stack[-1][0] >= level:
            self.header_stack.pop()
        self.header_stack.append((level, text))
        self.sections.append((tuple(t for _, t in self.header_stack), []))

    def flush(self) -> None:
        if not self.lines:
            return
        joined = " ".join(self.lines)
        self.lines = []
        if FIGURE_TOKEN_RE.search(joined):
            raise ParseError("reserved token '[FIGURE: ...]' in source text", source=self.source)
        figures = []

        def _lift(m: re.Match) -> str:
            self.fig_count += 1
            fig_id = f"f{self.fig_count}"
            caption = _WS_RE.sub(" ", m.group(1)).strip()
            figures.append(FigureLabel(fig_id, caption or fig_id, m.group(2)))
            return " "

        text = _WS_RE.sub(" ", _IMAGE_RE.sub(_lift, joined)).strip()
        if not self.sections:
            self.sections.append(((self.title,), []))
        paras = self.sections[-1][1]
        if not text and figures and paras:
            # figure-only block: belongs to the paragraph it illustrates
            prev_text, prev_figs = paras[-1]
            paras[-1] = (prev_text, prev_figs + figures)
        elif text or figures:
            paras.append((text, figures))

    def build(self) -> tuple[Section, ...]:
        self.flush()
        out = []
        for path, paras in self.sections:
            if not paras:
                continue
            si = len(out) + 1
            built = []
            for pi, (text, figures) in enumerate(paras, start=1):
                built.append(_make_paragraph(f"{self.doc_id}-{si}-{pi}", text, figures))
            out.append(Section(path, tuple(built)))
        return tuple(out)


def _make_paragraph(para_id: str, text: str, figures: list[FigureLabel]) -> Paragraph:
    tokens = " ".join(f"[FIGURE: {f.fig_id}]" for f in figures)
    text = f"{text} {tokens}".strip() if tokens else text
    sentences = tuple(
        Sentence(f"{para_id}-{i}", text[a:b], (a, b))
        for i, (a, b) in enumerate(segment_sentences(text), start=1)
    )
    return Paragraph(para_id, text, tuple(figures), sentences)


def parse_document(raw: str, source: str | None = None) -> RegulationDocument:
    meta, body = _split_front_matter(raw, source)
    tier = SourceTier.parse(meta["tier"])
    builder = _Builder(meta["doc_id"], meta["title"], source)
    for line in body.splitlines():
        if m := _HEADER_RE.match(line):
            builder.header(len(m.group(1)), m.group(2).strip())
        elif not line.strip() or _RULE_RE.match(line):
            builder.flush()
        elif m := _BULLET_RE.match(line):
            builder.flush()
            builder.lines.append(m.group(1).strip())
        elif m := _ORDERED_RE.match(line):
            builder.flush()
            builder.lines.append(m.group(1).strip())
        else:
            builder.lines.append(line.strip())
    return RegulationDocument(
        doc_id=meta["doc_id"],
        region=meta["region"],
        tier=tier,
        title=meta["title"],
        sections=builder.build(),
    )


def serialize_document(doc: RegulationDocument) -> str:
    """Render a document back to normalized markdown (re-parses to an equal document)."""
    out = [
        "---",
        f"doc_id: {doc.doc_id}",
        f"region: {doc.region}",
        f"tier: {doc.tier.value}",
        f"title: {doc.title}",
        "---",
        "",
    ]
    prev: tuple[str, ...] = ()
    for section in doc.sections:
        path = section.header_path
        common = 0
        while common < min(len(prev), len(path) - 1) and prev[common] == path[common]:
            common += 1
        for depth in range(common, len(path)):
            out += ["#" * (depth + 1) + " " + path[depth], ""]
        prev = path
        for para in section.paragraphs:
            figs = {f.fig_id: f for f in para.figure_labels}

            def _restore(m: re.Match) -> str:
                f = figs[m.group(1)]
                return f"![{f.caption_text}]({f.source_ref})"

            out += [FIGURE_TOKEN_RE.sub(_restore, para.text), ""]
    return "\n".join(out)


@dataclass(frozen=True)
class ParagraphRef:
    doc: RegulationDocument
    section_index: int
    paragraph_index: int

    @property
    def section(self) -> Section:
        return self.doc.sections[self.section_index]

    @property
    def paragraph(self) -> Paragraph:
        return self.section.paragraphs[self.paragraph_index]

    @property
    def position(self) -> tuple[str, int, int]:
        return (self.doc.doc_id, self.section_index, self.paragraph_index)


@dataclass(frozen=True)
class Corpus:
    documents: tuple[RegulationDocument, ...]
    warnings: tuple[str, ...] = ()
    _docs: dict = field(init=False, repr=False, compare=False)
    _paras: dict = field(init=False, repr=False, compare=False)
    _sents: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        docs, paras, sents = {}, {}, {}
        for doc in self.documents:
            if doc.doc_id in docs:
                raise ConflictError(f"duplicate doc_id {doc.doc_id!r}", doc.doc_id)
            docs[doc.doc_id] = doc
            for si, section in enumerate(doc.sections):
                for pi, para in enumerate(section.paragraphs):
                    ref = ParagraphRef(doc, si, pi)
                    paras[para.para_id] = ref
                    for ti, sent in enumerate(para.sentences):
                        sents[sent.sent_id] = (ref, ti)
        object.__setattr__(self, "_docs", docs)
        object.__setattr__(self, "_paras", paras)
        object.__setattr__(self, "_sents", sents)

    def __len__(self) -> int:
        return len(self.documents)

    def doc(self, doc_id: str) -> RegulationDocument:
        return self._docs[doc_id]

    def paragraph(self, para_id: str) -> ParagraphRef:
        return self._paras[para_id]

    def sentence(self, sent_id: str) -> tuple[ParagraphRef, Sentence]:
        ref, ti = self._sents[sent_id]
        return ref, ref.paragraph.sentences[ti]

    def has_sentence(self, sent_id: str) -> bool:
        return sent_id in self._sents

    def paragraph_refs(self) -> Iterator[ParagraphRef]:
        """All paragraphs in canonical order: doc_id, then position."""
        for doc in sorted(self.documents, key=lambda d: d.doc_id):
            for si, section in enumerate(doc.sections):
                for pi in range(len(section.paragraphs)):
                    yield ParagraphRef(doc, si, pi)

    def regions(self) -> list[str]:
        return sorted({d.region for d in self.documents})

    def region_view(self, region: str) -> "Corpus":
        return Corpus(tuple(d for d in self.documents if d.region == region), self.warnings)

    def digest(self) -> str:
        cached = self.__dict__.get("_digest")
        if cached is None:
            h = hashlib.sha256()
            for doc in sorted(self.documents, key=lambda d: d.doc_id):
                h.update(serialize_document(doc).encode("utf-8"))
                h.update(b"\x00")
            cached = h.hexdigest()
            object.__setattr__(self, "_digest", cached)
        return cached


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"corpus directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".md", ".markdown"))
    docs = []
    owners: dict[str, str] = {}
    for path in files:
        try:
            raw = path.read_text(encoding="utf-8")
            doc = parse_document(raw, source=path.name)
        except UnicodeDecodeError as exc:
            raise ParseError(f"{path.name}: not valid UTF-8 ({exc})", source=path.name) from exc
        except ParseError as exc:
            raise ParseError(f"{path.name}: {exc}", key=exc.key, source=path.name) from exc
        if doc.doc_id in owners:
            raise ConflictError(
                f"duplicate doc_id {doc.doc_id!r} in {owners[doc.doc_id]} and {path.name}",
                doc.doc_id,
            )
        owners[doc.doc_id] = path.name
        docs.append(doc)
    warnings = ()
    if not docs:
        warnings = (f"corpus directory {directory} contains no documents",)
        log.warning(warnings[0])
    docs.sort(key=lambda d: d.doc_id)
    return Corpus(tuple(docs), warnings)
