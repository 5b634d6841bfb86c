"""Graph update engine: extraction, entity alignment, relation normalization.

One chat call per document yields an :class:`ExtractionBatch`. Batches may be
produced in parallel; :func:`apply_update` is the only graph writer and
processes candidates in canonical ``(submitted_at, doc_id, span)`` order,
so the final graph depends only on the multiset of batches.

Each entity owns exactly one vector in the :class:`~benchforge.hnsw.HNSWIndex`,
computed from the ``"type | name | description"`` string of the mention that
created it, which is also its earliest mention. That vector never changes
afterwards, so re-ingesting a corpus merges every candidate into an existing
node instead of creating new ones.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import prompts
from .corpus import Document
from .gateway import ChatRequest, ContractViolation, Gateway, Message, TransportError, parse_json_reply
from .graph import (
    EvidenceRecord,
    Entity,
    GraphError,
    KnowledgeGraph,
    Mention,
    RelationEdge,
    id_number,
    score_confidence,
)
from .hnsw import HNSWIndex

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.85
NORMALIZE_THRESHOLD = 0.6
ALIGN_TOP_K = 8

__all__ = [
    "AlignmentDecision",
    "CandidateEntity",
    "CandidateRelation",
    "EntityIndex",
    "ExtractionBatch",
    "ExtractionFailure",
    "PredicateSchema",
    "RelationNormalizer",
    "UpdateDelta",
    "align_entity",
    "apply_update",
    "compose_key",
    "extract_batch",
    "extract_corpus",
    "normalize_relation",
    "score_confidence",
]


# --------------------------------------------------------------------------
# Extraction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateEntity:
    type_label: str
    name: str
    description: str
    section_label: str
    start: int
    end: int

    def to_json(self) -> dict:
        return {"type": self.type_label, "name": self.name, "description": self.description,
                "section": self.section_label, "span": [self.start, self.end]}


@dataclass(frozen=True)
class CandidateRelation:
    subject: str
    predicate: str
    object: str
    section_label: str
    start: int
    end: int

    def to_json(self) -> dict:
        return {"subject": self.subject, "predicate": self.predicate, "object": self.object,
                "section": self.section_label, "span": [self.start, self.end]}


@dataclass(frozen=True)
class ExtractionBatch:
    doc_id: str
    submitted_at: datetime
    candidate_entities: tuple[CandidateEntity, ...]
    candidate_relations: tuple[CandidateRelation, ...]

    @property
    def n(self) -> int:
        return len(self.candidate_entities)

    @property
    def m(self) -> int:
        return len(self.candidate_relations)


@dataclass(frozen=True)
class ExtractionFailure:
    doc_id: str
    reason: str


def _span_ok(doc: Document, label: str, start: int, end: int) -> bool:
    try:
        text = doc.section(label).text
    except KeyError:
        return False
    return 0 <= start < end <= len(text)


def _parse_extraction(doc: Document, payload: object) -> ExtractionBatch:
    if not isinstance(payload, dict):
        raise ValueError("reply is not a JSON object")
    entities: list[CandidateEntity] = []
    for raw in payload.get("entities", []):
        try:
            ent = CandidateEntity(str(raw["type"]).strip(), str(raw["name"]).strip(),
                                  str(raw.get("description", "")).strip(), str(raw["section"]),
                                  int(raw["span"][0]), int(raw["span"][1]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            logger.warning("%s: dropping malformed entity %r (%s)", doc.id, raw, exc)
            continue
        if not ent.name or not ent.type_label:
            logger.warning("%s: dropping entity without name or type", doc.id)
            continue
        if not _span_ok(doc, ent.section_label, ent.start, ent.end):
            logger.warning("%s: dropping entity %r with out-of-document span", doc.id, ent.name)
            continue
        entities.append(ent)
    names = {e.name.casefold() for e in entities}
    relations: list[CandidateRelation] = []
    for raw in payload.get("relations", []):
        try:
            rel = CandidateRelation(str(raw["subject"]).strip(), str(raw["predicate"]).strip(),
                                    str(raw["object"]).strip(), str(raw["section"]),
                                    int(raw["span"][0]), int(raw["span"][1]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            logger.warning("%s: dropping malformed relation %r (%s)", doc.id, raw, exc)
            continue
        if rel.subject.casefold() not in names or rel.object.casefold() not in names:
            logger.warning("%s: dropping relation %r -> %r: endpoint is not an extracted entity",
                           doc.id, rel.subject, rel.object)
            continue
        if not rel.predicate or not _span_ok(doc, rel.section_label, rel.start, rel.end):
            logger.warning("%s: dropping relation %r with empty predicate or bad span", doc.id, rel.predicate)
            continue
        relations.append(rel)
    return ExtractionBatch(doc.id, doc.submitted_at, tuple(entities), tuple(relations))


def extract_batch(doc: Document, gateway: Gateway, schema: "PredicateSchema | None" = None) -> ExtractionBatch | ExtractionFailure:
    """Extract candidate entities and relations with one chat call.

    An unparseable reply gets one repair turn; a second failure yields an
    :class:`ExtractionFailure` so the pipeline can continue.
    """
    if doc.char_length == 0:
        raise ContractViolation(f"document {doc.id} is empty")
    template = prompts.load("extract")
    system, user = template.render(
        types=", ".join(schema.entity_types) if schema else "any",
        predicates=", ".join(schema.predicates) if schema else "any",
        title=doc.title or doc.id,
        document=doc.full_text,
    )
    tag = f"extract:{doc.id}"
    request = ChatRequest.build(system, user, tag)
    tokens = ms = 0
    error = ""
    for attempt in range(2):
        try:
            response = gateway.complete(request)
        except TransportError as exc:
            error = f"transport: {exc}"
            break
        tokens += response.total_tokens
        ms += response.latency_ms
        try:
            batch = _parse_extraction(doc, parse_json_reply(response.text))
        except ValueError as exc:
            error = f"unparseable reply: {exc}"
            if attempt == 0:
                _, fix = prompts.load("repair").render(error=str(exc)[:200])
                request = ChatRequest(request.messages + (Message("assistant", response.text or "(empty)"),
                                                          Message("user", fix)), tag=tag)
            continue
        gateway.ledger.record_document(doc.id, doc.char_length, tokens, ms)
        return batch
    if tokens:
        gateway.ledger.record_document(doc.id, doc.char_length, tokens, ms)
    logger.warning("extraction failed for %s: %s", doc.id, error)
    return ExtractionFailure(doc.id, error)


def extract_corpus(docs: Sequence[Document], gateway: Gateway, schema: "PredicateSchema | None" = None,
                   workers: int = 1) -> tuple[list[ExtractionBatch], list[ExtractionFailure]]:
    """Run :func:`extract_batch` over ``docs`` with a bounded worker pool."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda d: extract_batch(d, gateway, schema), docs))
    else:
        results = [extract_batch(d, gateway, schema) for d in docs]
    batches = [r for r in results if isinstance(r, ExtractionBatch)]
    failures = [r for r in results if isinstance(r, ExtractionFailure)]
    return batches, failures


# --------------------------------------------------------------------------
# Relation normalization
# --------------------------------------------------------------------------


def _surface(label: str) -> str:
    return label.replace("_", " ")


@dataclass(frozen=True)
class PredicateSchema:
    """Canonical predicates of one domain, each with optional surface aliases."""

    domain_id: str
    predicates: tuple[str, ...]
    aliases: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    entity_types: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.predicates:
            raise ContractViolation("predicate schema is empty")

    @classmethod
    def of(cls, predicates: Iterable[str]) -> "PredicateSchema":
        return cls("", tuple(predicates))

    @classmethod
    def from_json(cls, data: Mapping) -> "PredicateSchema":
        preds = data["predicates"]
        if isinstance(preds, Mapping):
            names = tuple(preds)
            aliases = {k: tuple(v) for k, v in preds.items()}
        else:
            names, aliases = tuple(preds), {}
        return cls(data.get("domain_id", ""), names, aliases, tuple(data.get("entity_types", ())))

    @classmethod
    def load(cls, path: str | Path) -> "PredicateSchema":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "entity_types": list(self.entity_types),
            "predicates": {p: list(self.aliases.get(p, ())) for p in self.predicates},
        }

    def surfaces(self) -> list[tuple[str, str]]:
        """``(surface text, canonical predicate)`` pairs in schema order."""
        out = []
        for pred in self.predicates:
            out.append((_surface(pred), pred))
            out.extend((alias, pred) for alias in self.aliases.get(pred, ()))
        return out


@dataclass(frozen=True)
class Normalization:
    predicate: str | None
    similarity: float

    @property
    def rejected(self) -> bool:
        return self.predicate is None


class RelationNormalizer:
    """Nearest canonical predicate by embedding cosine, via an HNSW index over surface forms."""

    def __init__(self, schema: PredicateSchema, embed: Callable[[str], np.ndarray],
                 threshold: float = NORMALIZE_THRESHOLD, seed: int = 0) -> None:
        self.schema = schema
        self.threshold = threshold
        self._embed = embed
        self._surfaces = schema.surfaces()
        self._rank = {pred: i for i, pred in enumerate(schema.predicates)}
        first = embed(self._surfaces[0][0])
        self._index = HNSWIndex(dim=len(first), seed=seed, capacity=len(self._surfaces))
        for i, (text, _) in enumerate(self._surfaces):
            self._index.add(str(i), first if i == 0 else embed(text))
        self._cache: dict[str, Normalization] = {}

    def best(self, phrase: str) -> Normalization:
        """Nearest predicate and its similarity, ignoring the threshold."""
        text = _surface(phrase.strip())
        hits = self._index.search(self._embed(text), k=min(ALIGN_TOP_K, len(self._surfaces)))
        scored: dict[str, float] = {}
        for key, sim in hits:
            pred = self._surfaces[int(key)][1]
            scored[pred] = max(scored.get(pred, -1.0), sim)
        pred, sim = min(scored.items(), key=lambda kv: (-kv[1], self._rank[kv[0]]))
        return Normalization(pred, min(1.0, sim))

    def __call__(self, phrase: str) -> Normalization:
        cached = self._cache.get(phrase)
        if cached is not None:
            return cached
        nearest = self.best(phrase)
        result = nearest if nearest.similarity >= self.threshold else Normalization(None, nearest.similarity)
        self._cache[phrase] = result
        return result


def normalize_relation(phrase: str, schema: PredicateSchema | Sequence[str],
                       embed: Callable[[str], np.ndarray] | None = None,
                       threshold: float = NORMALIZE_THRESHOLD) -> Normalization:
    """Map a predicate phrase onto the schema, or reject it below ``threshold``."""
    if not isinstance(schema, PredicateSchema):
        schema = PredicateSchema.of(schema)
    if embed is None:
        from .gateway import trigram_embed as embed
    return RelationNormalizer(schema, embed, threshold)(phrase)


# --------------------------------------------------------------------------
# Entity alignment
# --------------------------------------------------------------------------


def compose_key(type_label: str, name: str, description: str) -> str:
    return f"{type_label} | {name} | {description}"


@dataclass(frozen=True)
class AlignmentDecision:
    candidate: CandidateEntity
    outcome: str  # "merged" or "created"
    entity_id: str | None  # None for "created" until an id is allocated
    similarity: float


class EntityIndex:
    """HNSW index keyed by entity id, with the embedding function it was built with."""

    def __init__(self, embed: Callable[[str], np.ndarray], dim: int, m: int = 16, ef_construction: int = 200,
                 ef_search: int = 100, seed: int = 0, capacity: int = 1024) -> None:
        self.embed = embed
        self.hnsw = HNSWIndex(dim, m=m, ef_construction=ef_construction, ef_search=ef_search, seed=seed,
                              capacity=capacity)

    def __len__(self) -> int:
        return len(self.hnsw)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.hnsw

    def add(self, entity_id: str, vector: np.ndarray) -> None:
        self.hnsw.add(entity_id, vector)

    def remove(self, entity_id: str) -> None:
        self.hnsw.remove(entity_id)

    def search(self, vector: np.ndarray, k: int = ALIGN_TOP_K) -> list[tuple[str, float]]:
        return self.hnsw.search(vector, k)

    @classmethod
    def rebuild(cls, graph: KnowledgeGraph, embed: Callable[[str], np.ndarray], dim: int, **params) -> "EntityIndex":
        """Index an existing graph from each entity's earliest mention, in id order."""
        index = cls(embed, dim, capacity=max(len(graph.entities), 16), **params)
        for eid in sorted(graph.entities, key=id_number):
            head = graph.entities[eid].provenance[0]
            index.add(eid, embed(compose_key(head.type_label, head.name, head.description)))
        return index


def align_entity(candidate: CandidateEntity, index: EntityIndex, tau: float = DEFAULT_TAU,
                 vector: np.ndarray | None = None) -> AlignmentDecision:
    """Merge into the most similar indexed entity if cosine >= ``tau``, else create."""
    if not candidate.name:
        raise ContractViolation("candidate entity has an empty name")
    if len(index) == 0:
        return AlignmentDecision(candidate, "created", None, 0.0)
    if vector is None:
        vector = index.embed(compose_key(candidate.type_label, candidate.name, candidate.description))
    hits = index.search(vector, ALIGN_TOP_K)
    if not hits:
        return AlignmentDecision(candidate, "created", None, 0.0)
    best_id, best_sim = min(hits, key=lambda h: (-h[1], id_number(h[0])))
    best_sim = max(-1.0, min(1.0, best_sim))
    if best_sim >= tau:
        return AlignmentDecision(candidate, "merged", best_id, best_sim)
    return AlignmentDecision(candidate, "created", None, best_sim)


# --------------------------------------------------------------------------
# Update
# --------------------------------------------------------------------------


@dataclass
class UpdateDelta:
    created: list[str] = field(default_factory=list)
    merged: list[tuple[str, float]] = field(default_factory=list)
    edges_created: list[str] = field(default_factory=list)
    edges_incremented: list[str] = field(default_factory=list)
    relations_rejected: list[tuple[str, str]] = field(default_factory=list)  # (doc_id, phrase)
    deferred: list[tuple[str, str]] = field(default_factory=list)  # (doc_id, name)
    align_seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "entities_created": len(self.created),
            "entities_merged": len(self.merged),
            "edges_created": len(self.edges_created),
            "edges_incremented": len(self.edges_incremented),
            "relations_rejected": len(self.relations_rejected),
            "candidates_deferred": len(self.deferred),
        }


def _mention(batch: ExtractionBatch, cand: CandidateEntity) -> Mention:
    return Mention(batch.submitted_at, batch.doc_id, cand.section_label, cand.start, cand.end,
                   cand.name, cand.type_label, cand.description)


def _mention_order(cand: CandidateEntity) -> tuple:
    return (cand.section_label, cand.start, cand.end, cand.name, cand.type_label, cand.description)


def apply_update(graph: KnowledgeGraph, index: EntityIndex, batches: Iterable[ExtractionBatch],
                 normalizer: RelationNormalizer, tau: float = DEFAULT_TAU,
                 domain_id: str | None = None) -> UpdateDelta:
    """Align and merge ``batches`` into ``graph`` atomically.

    Raises :class:`GraphError` on an integrity violation, in which case the
    graph and the index are left exactly as they were.
    """
    if domain_id is not None:
        graph.check_domain(domain_id)
    ordered = sorted(batches, key=lambda b: (b.submitted_at, b.doc_id))
    delta = UpdateDelta()
    touched_mentions: dict[str, list[Mention]] = {}
    new_ids: list[str] = []
    edge_evidence: dict[tuple[str, str, str], list[EvidenceRecord]] = {}
    next_entity, next_edge = graph.next_entity, graph.next_edge
    clock = graph.clock

    def allocate_entity() -> str:
        nonlocal next_entity
        eid = f"E{next_entity:06d}"
        next_entity += 1
        return eid

    try:
        for batch in ordered:
            if graph.window and not graph.window[0] <= batch.submitted_at <= graph.window[1]:
                raise GraphError(f"document {batch.doc_id} is outside the graph window")
            clock = batch.submitted_at if clock is None else max(clock, batch.submitted_at)
            local: dict[str, str] = {}
            retry: list[CandidateEntity] = []

            def place(cand: CandidateEntity) -> None:
                vec = index.embed(compose_key(cand.type_label, cand.name, cand.description))
                start = time.perf_counter()
                decision = align_entity(cand, index, tau, vector=vec)
                delta.align_seconds += time.perf_counter() - start
                if decision.outcome == "merged":
                    eid = decision.entity_id
                    delta.merged.append((eid, decision.similarity))
                else:
                    eid = allocate_entity()
                    index.add(eid, vec)
                    new_ids.append(eid)
                    delta.created.append(eid)
                touched_mentions.setdefault(eid, []).append(_mention(batch, cand))
                local.setdefault(cand.name.casefold(), eid)

            # same order as Mention sorting, so the creating mention is always provenance[0]
            for cand in sorted(batch.candidate_entities, key=_mention_order):
                try:
                    place(cand)
                except TransportError:
                    retry.append(cand)
            for cand in retry:
                try:
                    place(cand)
                except TransportError:
                    logger.warning("%s: embedding failed twice for %r; candidate deferred", batch.doc_id, cand.name)
                    delta.deferred.append((batch.doc_id, cand.name))

            for rel in batch.candidate_relations:
                subj = local.get(rel.subject.casefold())
                obj = local.get(rel.object.casefold())
                if subj is None or obj is None:
                    continue
                if subj == obj:
                    logger.info("%s: dropping self-loop %r", batch.doc_id, rel.predicate)
                    continue
                norm = normalizer(rel.predicate)
                if norm.rejected:
                    delta.relations_rejected.append((batch.doc_id, rel.predicate))
                    continue
                key = (subj, norm.predicate, obj)
                ev = EvidenceRecord(batch.submitted_at, batch.doc_id, rel.section_label, rel.start, rel.end)
                edge_evidence.setdefault(key, []).append(ev)

        # build the new values
        entities: dict[str, Entity] = {}
        for eid, mentions in touched_mentions.items():
            existing = graph.entities.get(eid)
            entities[eid] = existing.merged(mentions) if existing else Entity.from_mentions(eid, mentions)
        edges: dict[str, RelationEdge] = {}
        for key in sorted(edge_evidence, key=lambda k: (id_number(k[0]), k[1], id_number(k[2]))):
            existing = graph.edge_for(key)
            if existing is not None:
                rid = existing.edge_id
                evidence = (*existing.evidence, *edge_evidence[key])
                delta.edges_incremented.append(rid)
            else:
                rid = f"R{next_edge:06d}"
                next_edge += 1
                evidence = tuple(edge_evidence[key])
                delta.edges_created.append(rid)
            edges[rid] = RelationEdge.build(rid, key[0], key[1], key[2], evidence, clock)

        for edge in edges.values():
            for end in (edge.subject_id, edge.object_id):
                if end not in entities and end not in graph.entities:
                    raise GraphError(f"edge {edge.edge_id} references unknown entity {end}")
    except Exception:
        for eid in new_ids:
            if eid in index:
                index.remove(eid)
        raise

    graph.commit(entities, edges, clock, next_entity, next_edge)
    logger.info("update applied: %s", delta.summary())
    return delta
