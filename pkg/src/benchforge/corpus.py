"""Time-framed document collection, section segmentation and retrieval chunks."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Iterator, Protocol

from .serde import format_time, parse_time, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionCriteria:
    domain_id: str
    categories: tuple[str, ...]
    window_start: datetime
    window_end: datetime
    keywords: tuple[str, ...] = ()
    # "full_text" matches title + every section, "title" matches the title only
    keyword_scope: str = "full_text"

    def __post_init__(self) -> None:
        if not self.categories:
            raise ValueError("selection criteria need at least one category")
        if self.window_start > self.window_end:
            raise ValueError("window start is after window end")
        if self.keyword_scope not in ("full_text", "title"):
            raise ValueError(f"unknown keyword scope {self.keyword_scope!r}")

    def in_window(self, ts: datetime) -> bool:
        return self.window_start <= ts <= self.window_end


@dataclass(frozen=True)
class Section:
    label: str
    text: str


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    authors: tuple[str, ...]
    categories: tuple[str, ...]
    submitted_at: datetime
    sections: tuple[Section, ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("document id is empty")
        if not self.sections:
            raise ValueError(f"document {self.id} has no sections")

    def section(self, label: str) -> Section:
        for sec in self.sections:
            if sec.label == label:
                return sec
        raise KeyError(f"document {self.id} has no section {label!r}")

    @property
    def char_length(self) -> int:
        return sum(len(s.text) for s in self.sections)

    @property
    def full_text(self) -> str:
        return "\n\n".join(f"[{s.label}]\n{s.text}" for s in self.sections)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "authors": list(self.authors),
            "categories": list(self.categories),
            "submitted_at": format_time(self.submitted_at),
            "sections": [{"label": s.label, "text": s.text} for s in self.sections],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Document":
        return cls(
            id=str(data["id"]),
            title=str(data.get("title", "")),
            authors=tuple(data.get("authors", ())),
            categories=tuple(data["categories"]),
            submitted_at=parse_time(data["submitted_at"]),
            sections=tuple(Section(str(s["label"]), str(s["text"])) for s in data["sections"]),
        )


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    section_label: str
    text: str
    char_start: int
    char_end: int

    def to_json(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "section_label": self.section_label,
            "char_start": self.char_start,
            "char_end": self.char_end,
            "text": self.text,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Chunk":
        return cls(data["chunk_id"], data["doc_id"], data["section_label"], data["text"],
                   int(data["char_start"]), int(data["char_end"]))


@dataclass(frozen=True)
class ChunkPolicy:
    limit: int = 1000
    overlap: int = 100

    def __post_init__(self) -> None:
        if self.limit <= 0 or not 0 <= self.overlap < self.limit:
            raise ValueError("chunk policy needs limit > 0 and 0 <= overlap < limit")


@dataclass
class Corpus:
    domain_id: str
    documents: list[Document] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_id = {d.id: d for d in self.documents}
        if len(self._by_id) != len(self.documents):
            raise ValueError("duplicate document ids in corpus")

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise KeyError(f"document {doc_id!r} not in corpus {self.domain_id!r}") from None

    def span_text(self, doc_id: str, section_label: str, start: int, end: int) -> str:
        return self.get(doc_id).section(section_label).text[start:end]

    def write_jsonl(self, path: str | Path) -> None:
        write_jsonl(path, (d.to_json() for d in self.documents))

    @classmethod
    def read_jsonl(cls, path: str | Path, domain_id: str) -> "Corpus":
        docs = [Document.from_json(row) for row in read_jsonl(path)]
        return cls(domain_id, sorted(docs, key=lambda d: (d.submitted_at, d.id)))


# --------------------------------------------------------------------------
# Sources
# --------------------------------------------------------------------------


class DocumentSource(Protocol):
    def records(self) -> Iterable[tuple[str, Any]]:
        """Yield ``(origin, raw_record)`` pairs; origin is used in log messages."""
        ...


class LocalDirectorySource:
    """Reads ``*.jsonl`` (one document per line) and ``*.json`` files."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    def records(self) -> Iterator[tuple[str, Any]]:
        if not self.path.is_dir():
            raise FileNotFoundError(f"document directory {self.path} is not readable")
        for file in sorted(self.path.iterdir()):
            if file.suffix == ".jsonl":
                with file.open(encoding="utf-8") as fh:
                    for lineno, line in enumerate(fh, start=1):
                        if not line.strip():
                            continue
                        origin = f"{file.name}:{lineno}"
                        try:
                            yield origin, json.loads(line)
                        except json.JSONDecodeError as exc:
                            yield origin, exc
            elif file.suffix == ".json":
                try:
                    data = json.loads(file.read_text(encoding="utf-8"))
                except json.JSONDecodeError as exc:
                    yield file.name, exc
                    continue
                items = data if isinstance(data, list) else [data]
                for i, item in enumerate(items):
                    yield f"{file.name}[{i}]", item


def _matches_keywords(doc: Document, criteria: SelectionCriteria) -> bool:
    if not criteria.keywords:
        return True
    fields = [doc.title]
    if criteria.keyword_scope == "full_text":
        fields.extend(s.text for s in doc.sections)
    haystack = "\n".join(fields).lower()
    return any(kw.lower() in haystack for kw in criteria.keywords)


def accepts(doc: Document, criteria: SelectionCriteria) -> bool:
    return (
        criteria.in_window(doc.submitted_at)
        and bool(set(doc.categories) & set(criteria.categories))
        and _matches_keywords(doc, criteria)
    )


def collect(source: DocumentSource, criteria: SelectionCriteria) -> Corpus:
    """Gather every document from ``source`` that satisfies ``criteria``.

    Malformed records are skipped with a logged reason. The result is sorted
    by ``(submitted_at, id)``.
    """
    kept: dict[str, Document] = {}
    for origin, raw in source.records():
        if isinstance(raw, Exception):
            logger.warning("skipping %s: %s", origin, raw)
            continue
        try:
            doc = Document.from_json(raw)
        except (KeyError, TypeError, ValueError) as exc:
            logger.warning("skipping malformed record %s: %s", origin, exc)
            continue
        if not accepts(doc, criteria):
            continue
        if doc.id in kept:
            logger.warning("skipping duplicate document id %s at %s", doc.id, origin)
            continue
        kept[doc.id] = doc
    if not kept:
        logger.warning("no documents matched the selection criteria for domain %s", criteria.domain_id)
    docs = sorted(kept.values(), key=lambda d: (d.submitted_at, d.id))
    return Corpus(criteria.domain_id, docs)


# --------------------------------------------------------------------------
# Chunking
# --------------------------------------------------------------------------


def chunk_id_for(doc_id: str, section_label: str, start: int, end: int) -> str:
    return f"{doc_id}:{section_label}:{start}-{end}"


def segment_and_chunk(doc: Document, policy: ChunkPolicy = ChunkPolicy()) -> list[Chunk]:
    chunks: list[Chunk] = []
    step = policy.limit - policy.overlap
    for sec in doc.sections:
        n = len(sec.text)
        if n == 0:
            logger.warning("document %s: empty section %r skipped", doc.id, sec.label)
            continue
        start = 0
        while True:
            end = min(start + policy.limit, n)
            chunks.append(Chunk(chunk_id_for(doc.id, sec.label, start, end), doc.id, sec.label,
                                sec.text[start:end], start, end))
            if end == n:
                break
            start += step
    return chunks


def chunk_corpus(corpus: Corpus, policy: ChunkPolicy = ChunkPolicy(), workers: int = 1) -> list[Chunk]:
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_doc = list(pool.map(lambda d: segment_and_chunk(d, policy), corpus.documents))
    else:
        per_doc = [segment_and_chunk(d, policy) for d in corpus.documents]
    return [c for chunks in per_doc for c in chunks]
