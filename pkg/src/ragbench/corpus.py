"""Load a directory of plain-text / markdown files into an immutable corpus."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

logger = logging.getLogger(__name__)

_BOM = "\ufeff"
_EXTENSIONS = {".md": "markdown", ".txt": "plain"}


class CorpusError(Exception):
    """Fatal ingestion failure (missing or unreadable directory)."""


class DecodeError(ValueError):
    def __init__(self, offset: int, reason: str = "invalid UTF-8"):
        super().__init__(f"{reason} at byte offset {offset}")
        self.offset = offset


class DocFormat(str, Enum):
    PLAIN = "plain"
    MARKDOWN = "markdown"


@dataclass(frozen=True)
class Document:
    doc_id: str
    source_path: str
    body: str
    format: DocFormat


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]
    log: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def get(self, doc_id: str) -> Document:
        for doc in self.documents:
            if doc.doc_id == doc_id:
                return doc
        raise KeyError(doc_id)


def normalize(raw: bytes) -> str:
    """Decode UTF-8 and normalize line endings and trailing whitespace.

    CRLF and lone CR become LF, a leading BOM is dropped and trailing
    whitespace is stripped from every line. Nothing else is touched.
    Raises DecodeError carrying the offset of the first bad byte.
    """
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(exc.start) from None
    if text.startswith(_BOM):
        text = text[1:]
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return "\n".join(line.rstrip() for line in text.split("\n"))


def _base_id(stem: str) -> str:
    # whitespace would break the whitespace tokenizer used for prompt accounting
    return re.sub(r"\s+", "-", stem.strip().lower()) or "doc"


def assign_doc_ids(paths: list[Path]) -> dict[Path, str]:
    """Map each path to a lowercase stem, suffixing -2, -3, ... on collision."""
    taken: set[str] = set()
    ids: dict[Path, str] = {}
    for path in sorted(paths, key=lambda p: (_base_id(p.stem), p.name)):
        base = _base_id(path.stem)
        candidate, n = base, 1
        while candidate in taken:
            n += 1
            candidate = f"{base}-{n}"
        taken.add(candidate)
        ids[path] = candidate
    return ids


def ingest_dir(path: str | os.PathLike, format_hint: DocFormat | str | None = None) -> Corpus:
    """Read every ``.txt``/``.md`` file directly under ``path``.

    Other entries and undecodable files are skipped and recorded as
    ``SKIP <path> <reason>`` lines in ``Corpus.log``.
    """
    root = Path(path)
    if not root.is_dir():
        raise CorpusError(f"corpus directory not found: {root}")
    try:
        entries = sorted(root.iterdir())
    except OSError as exc:
        raise CorpusError(f"cannot read corpus directory {root}: {exc}") from exc

    hint = DocFormat(format_hint) if format_hint is not None else None
    log: list[str] = []
    warnings: list[str] = []
    accepted: list[Path] = []
    for entry in entries:
        if entry.is_dir():
            log.append(f"SKIP {entry} directory")
        elif entry.suffix.lower() not in _EXTENSIONS:
            log.append(f"SKIP {entry} unsupported extension")
        else:
            accepted.append(entry)

    ids = assign_doc_ids(accepted)
    documents: list[Document] = []
    for entry in accepted:
        try:
            body = normalize(entry.read_bytes())
        except DecodeError as exc:
            log.append(f"SKIP {entry} {exc}")
            continue
        except OSError as exc:
            log.append(f"SKIP {entry} unreadable: {exc.strerror}")
            continue
        fmt = hint or DocFormat(_EXTENSIONS[entry.suffix.lower()])
        documents.append(Document(ids[entry], str(entry), body, fmt))

    documents.sort(key=lambda d: d.doc_id)
    if not documents:
        warnings.append("empty corpus")
    for line in log:
        logger.warning(line)
    for msg in warnings:
        logger.warning("%s: %s", msg, root)
    return Corpus(tuple(documents), tuple(log), tuple(warnings))
