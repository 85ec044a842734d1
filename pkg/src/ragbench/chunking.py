"""Whitespace tokenization and the two document splitters.

A token is a maximal run of non-whitespace characters. Chunk spans are
half-open token ranges into the whole-document token stream, so heading
lines of a markdown file occupy token positions even though they never
appear inside a chunk body.
"""

from __future__ import annotations

import bisect
import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from .corpus import Corpus, DocFormat, Document

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\S+")
_HEADING_RE = re.compile(r"^ {0,3}(#{1,6})(?:[ \t]+(.*?))?(?:[ \t]+#+)?[ \t]*$")
_SENTENCE_END_RE = re.compile(r"[.!?][\"')\]]*$")


class Strategy(str, Enum):
    RECURSIVE_FIXED = "recursive_fixed"
    MARKDOWN_HEADER = "markdown_header"


@dataclass(frozen=True)
class SplitterParams:
    chunk_size: int = 500
    overlap: int = 50
    strategy: Strategy = Strategy.RECURSIVE_FIXED

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not 0 <= self.overlap < self.chunk_size:
            raise ValueError("overlap must satisfy 0 <= overlap < chunk_size")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    token_count: int
    header_path: tuple[str, ...]
    span: tuple[int, int]

    @property
    def retrieval_text(self) -> str:
        """Body with the heading chain prepended, as embedded and prompted."""
        if not self.header_path:
            return self.text
        return " > ".join(self.header_path) + "\n" + self.text

    def to_json(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "header_path": list(self.header_path),
            "span": list(self.span),
            "token_count": self.token_count,
            "text": self.text,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Chunk":
        return cls(
            chunk_id=obj["chunk_id"],
            doc_id=obj["doc_id"],
            text=obj["text"],
            token_count=int(obj["token_count"]),
            header_path=tuple(obj["header_path"]),
            span=(int(obj["span"][0]), int(obj["span"][1])),
        )


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def count_tokens(text: str) -> int:
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def truncate_tokens(text: str, n: int) -> str:
    """Keep the first ``n`` tokens of ``text``, cutting at a token boundary."""
    if n <= 0:
        return ""
    end = None
    for i, m in enumerate(_TOKEN_RE.finditer(text)):
        if i == n - 1:
            end = m.end()
            break
    return text if end is None else text[:end]


class _TokenStream:
    """Token offsets of one document body plus lazy boundary classification."""

    def __init__(self, body: str):
        self.body = body
        matches = list(_TOKEN_RE.finditer(body))
        self.starts = [m.start() for m in matches]
        self.ends = [m.end() for m in matches]

    def __len__(self) -> int:
        return len(self.starts)

    def text(self, start: int, end: int) -> str:
        return self.body[self.starts[start]:self.ends[end - 1]]

    def is_paragraph_break(self, b: int) -> bool:
        # boundary b sits between token b-1 and token b
        return "\n\n" in self.body[self.ends[b - 1]:self.starts[b]]

    def is_sentence_break(self, b: int) -> bool:
        return _SENTENCE_END_RE.search(self.body[self.starts[b - 1]:self.ends[b - 1]]) is not None


def _window_spans(stream: _TokenStream, lo: int, hi: int, size: int, overlap: int) -> list[tuple[int, int]]:
    """Sliding windows over tokens [lo, hi) with stride ``size - overlap``.

    A window end that falls short of ``hi`` is pulled back to the latest
    paragraph break, else sentence break, found within ``size // 10``
    tokens; without either it stays put (every token edge is a word edge).
    """
    spans: list[tuple[int, int]] = []
    if hi <= lo:
        return spans
    slack = size // 10
    start = lo
    while True:
        end = start + size
        if end >= hi:
            spans.append((start, hi))
            return spans
        # the next window must still advance past `start`
        floor = max(end - slack, start + overlap + 1)
        snapped = None
        for b in range(end, floor - 1, -1):
            if stream.is_paragraph_break(b):
                snapped = b
                break
        if snapped is None:
            for b in range(end, floor - 1, -1):
                if stream.is_sentence_break(b):
                    snapped = b
                    break
        if snapped is not None:
            end = snapped
        spans.append((start, end))
        start = end - overlap


def _make_chunks(doc: Document, stream: _TokenStream, spans: Iterable[tuple[int, int]],
                 header_path: tuple[str, ...], first_ordinal: int) -> list[Chunk]:
    out = []
    for i, (s, e) in enumerate(spans, start=first_ordinal):
        out.append(Chunk(
            chunk_id=f"{doc.doc_id}:{i:04d}",
            doc_id=doc.doc_id,
            text=stream.text(s, e),
            token_count=e - s,
            header_path=header_path,
            span=(s, e),
        ))
    return out


def recursive_split(doc: Document, params: SplitterParams) -> list[Chunk]:
    stream = _TokenStream(doc.body)
    spans = _window_spans(stream, 0, len(stream), params.chunk_size, params.overlap)
    return _make_chunks(doc, stream, spans, (), 0)


def _sections(body: str) -> list[tuple[tuple[str, ...], int, int]]:
    """Split a markdown body into (header_path, body_start_char, body_end_char)."""
    sections = []
    stack: list[tuple[int, str]] = []
    path: tuple[str, ...] = ()
    sec_start = 0
    pos = 0
    for line in body.split("\n"):
        line_end = pos + len(line)
        m = _HEADING_RE.match(line)
        if m:
            sections.append((path, sec_start, pos))
            level = len(m.group(1))
            while stack and stack[-1][0] >= level:
                stack.pop()
            stack.append((level, (m.group(2) or "").strip()))
            path = tuple(title for _, title in stack)
            sec_start = line_end
        pos = line_end + 1
    sections.append((path, sec_start, len(body)))
    return sections


def header_split(doc: Document, params: SplitterParams) -> list[Chunk]:
    """One chunk per markdown section, sub-splitting sections over ``chunk_size``.

    Chunk bodies exclude heading lines; the heading chain lives in
    ``header_path``. Sections with no body produce nothing.
    """
    if doc.format != DocFormat.MARKDOWN:
        logger.warning("%s is not markdown; falling back to recursive split", doc.doc_id)
        return recursive_split(doc, params)
    stream = _TokenStream(doc.body)
    chunks: list[Chunk] = []
    for path, cs, ce in _sections(doc.body):
        lo = bisect.bisect_left(stream.starts, cs)
        hi = bisect.bisect_left(stream.starts, ce)
        if hi <= lo:
            continue
        spans = _window_spans(stream, lo, hi, params.chunk_size, params.overlap)
        chunks.extend(_make_chunks(doc, stream, spans, path, len(chunks)))
    return chunks


def split_document(doc: Document, params: SplitterParams) -> list[Chunk]:
    if params.strategy == Strategy.MARKDOWN_HEADER:
        return header_split(doc, params)
    return recursive_split(doc, params)


def chunk_corpus(corpus: Corpus, params: SplitterParams) -> list[Chunk]:
    chunks: list[Chunk] = []
    for doc in corpus.documents:
        chunks.extend(split_document(doc, params))
    return chunks
