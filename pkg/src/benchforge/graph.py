"""Evolving, provenance-carrying knowledge graph with time-sliced snapshots.

Entities and edges are immutable values. Every attribute of an entity (name,
type, description, aliases, first_seen) is derived from its provenance
mentions, and every edge statistic from its evidence records, so a snapshot
at time ``t`` is obtained by dropping the records newer than ``t`` and
re-deriving. Only :meth:`KnowledgeGraph.commit` mutates the store.

The node attribute map exposed as :attr:`KGSnapshot.attributes` holds the
``(type, name, description)`` projection of each entity at the snapshot time.
"""

from __future__ import annotations

import json
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from .serde import FormatError, dumps, format_time, parse_time, read_json, write_json, write_jsonl

SCHEMA_VERSION = 1

FREQUENCY_CAP = 16
RECENCY_SCALE_DAYS = 180.0
SUPPORT_CAP = 3


class GraphError(ValueError):
    pass


class SchemaVersionError(GraphError):
    pass


class NotFoundError(KeyError):
    pass


class DomainMismatchError(GraphError):
    pass


def id_number(item_id: str) -> int:
    return int(item_id[1:])


@dataclass(frozen=True, order=True)
class Mention:
    """One provenance record: where an entity was mentioned and how it was described."""

    submitted_at: datetime
    doc_id: str
    section_label: str
    start: int
    end: int
    name: str
    type_label: str
    description: str

    @property
    def span_key(self) -> tuple[str, str, int, int]:
        return (self.doc_id, self.section_label, self.start, self.end)

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "section_label": self.section_label,
            "char_span": [self.start, self.end],
            "submitted_at": format_time(self.submitted_at),
            "name": self.name,
            "type": self.type_label,
            "description": self.description,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Mention":
        return cls(parse_time(d["submitted_at"]), d["doc_id"], d["section_label"], int(d["char_span"][0]),
                   int(d["char_span"][1]), d["name"], d["type"], d["description"])


@dataclass(frozen=True, order=True)
class EvidenceRecord:
    submitted_at: datetime
    doc_id: str
    section_label: str
    start: int
    end: int
    count: int = 1

    @property
    def span_key(self) -> tuple[str, str, int, int]:
        return (self.doc_id, self.section_label, self.start, self.end)

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "section_label": self.section_label,
            "char_span": [self.start, self.end],
            "submitted_at": format_time(self.submitted_at),
            "count": self.count,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvidenceRecord":
        return cls(parse_time(d["submitted_at"]), d["doc_id"], d["section_label"], int(d["char_span"][0]),
                   int(d["char_span"][1]), int(d.get("count", 1)))


@dataclass(frozen=True)
class Entity:
    entity_id: str
    type_label: str
    name: str
    description: str
    aliases: tuple[str, ...]
    provenance: tuple[Mention, ...]
    first_seen: datetime

    @classmethod
    def from_mentions(cls, entity_id: str, mentions: Iterable[Mention]) -> "Entity":
        prov = tuple(sorted(set(mentions)))
        if not prov:
            raise GraphError(f"entity {entity_id} has no provenance")
        head = prov[0]
        description = min((m.description for m in prov), key=lambda d: (-len(d), d))
        aliases = tuple(sorted({m.name for m in prov} - {head.name}))
        return cls(entity_id, head.type_label, head.name, description, aliases, prov, head.submitted_at)

    def merged(self, mentions: Iterable[Mention]) -> "Entity":
        return Entity.from_mentions(self.entity_id, (*self.provenance, *mentions))

    def as_of(self, t: datetime) -> "Entity | None":
        if self.first_seen > t:
            return None
        if self.provenance[-1].submitted_at <= t:
            return self
        return Entity.from_mentions(self.entity_id, (m for m in self.provenance if m.submitted_at <= t))

    def to_json(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "type": self.type_label,
            "name": self.name,
            "description": self.description,
            "aliases": list(self.aliases),
            "provenance": [m.to_json() for m in self.provenance],
            "first_seen": format_time(self.first_seen),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Entity":
        ent = cls.from_mentions(d["entity_id"], [Mention.from_json(m) for m in d["provenance"]])
        if ent.name != d["name"] or format_time(ent.first_seen) != d["first_seen"]:
            raise GraphError(f"entity {d['entity_id']}: stored attributes disagree with provenance")
        return ent


def score_confidence(frequency: int, support: int, last_seen: datetime, now: datetime) -> float:
    """Blend of frequency, recency and textual support, clamped to [0, 1]."""
    f_hat = min(1.0, math.log1p(frequency) / math.log1p(FREQUENCY_CAP))
    delta_days = max(0.0, (now - last_seen).total_seconds() / 86400.0)
    r_hat = math.exp(-delta_days / RECENCY_SCALE_DAYS)
    s_hat = min(1.0, support / SUPPORT_CAP)
    return min(1.0, max(0.0, 0.4 * f_hat + 0.3 * r_hat + 0.3 * s_hat))


@dataclass(frozen=True)
class RelationEdge:
    edge_id: str
    subject_id: str
    predicate: str
    object_id: str
    evidence: tuple[EvidenceRecord, ...]
    confidence: float

    def __post_init__(self) -> None:
        if not self.evidence:
            raise GraphError(f"edge {self.edge_id} has no evidence")
        if not 0.0 <= self.confidence <= 1.0:
            raise GraphError(f"edge {self.edge_id} confidence {self.confidence} outside [0, 1]")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.subject_id, self.predicate, self.object_id)

    @property
    def frequency(self) -> int:
        return sum(e.count for e in self.evidence)

    @property
    def first_seen(self) -> datetime:
        return self.evidence[0].submitted_at

    @property
    def last_seen(self) -> datetime:
        return max(e.submitted_at for e in self.evidence)

    def other(self, entity_id: str) -> str:
        return self.object_id if entity_id == self.subject_id else self.subject_id

    def rescored(self, now: datetime) -> "RelationEdge":
        conf = score_confidence(self.frequency, len(self.evidence), self.last_seen, now)
        return RelationEdge(self.edge_id, self.subject_id, self.predicate, self.object_id, self.evidence, conf)

    @classmethod
    def build(cls, edge_id: str, subject_id: str, predicate: str, object_id: str,
              evidence: Iterable[EvidenceRecord], now: datetime) -> "RelationEdge":
        merged: dict[tuple, EvidenceRecord] = {}
        for ev in evidence:
            prev = merged.get(ev.span_key)
            if prev is None:
                merged[ev.span_key] = ev
            else:
                merged[ev.span_key] = EvidenceRecord(prev.submitted_at, prev.doc_id, prev.section_label,
                                                     prev.start, prev.end, prev.count + ev.count)
        records = tuple(sorted(merged.values()))
        edge = cls(edge_id, subject_id, predicate, object_id, records, 0.0)
        return edge.rescored(now)

    def as_of(self, t: datetime) -> "RelationEdge | None":
        if self.first_seen > t:
            return None
        kept = tuple(e for e in self.evidence if e.submitted_at <= t)
        edge = RelationEdge(self.edge_id, self.subject_id, self.predicate, self.object_id, kept, 0.0)
        return edge.rescored(t)

    def to_json(self) -> dict:
        return {
            "edge_id": self.edge_id,
            "subject_id": self.subject_id,
            "predicate": self.predicate,
            "object_id": self.object_id,
            "evidence": [e.to_json() for e in self.evidence],
            "frequency": self.frequency,
            "first_seen": format_time(self.first_seen),
            "last_seen": format_time(self.last_seen),
            "confidence": self.confidence,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RelationEdge":
        evidence = tuple(sorted(EvidenceRecord.from_json(e) for e in d["evidence"]))
        return cls(d["edge_id"], d["subject_id"], d["predicate"], d["object_id"], evidence, float(d["confidence"]))


# --------------------------------------------------------------------------
# Snapshots
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Fact:
    subject: str
    predicate: str
    object: str
    confidence: float
    edge_id: str


class KGSnapshot:
    """Immutable view of the graph at ``as_of``."""

    def __init__(self, as_of: datetime, entities: Mapping[str, Entity], edges: Mapping[str, RelationEdge]) -> None:
        self.as_of = as_of
        self.entities: Mapping[str, Entity] = MappingProxyType(dict(entities))
        self.edges: Mapping[str, RelationEdge] = MappingProxyType(dict(edges))
        incident: dict[str, list[str]] = {eid: [] for eid in self.entities}
        for edge in self.edges.values():
            if edge.subject_id not in self.entities or edge.object_id not in self.entities:
                raise GraphError(f"edge {edge.edge_id} references an entity outside the snapshot")
            incident[edge.subject_id].append(edge.edge_id)
            if edge.object_id != edge.subject_id:
                incident[edge.object_id].append(edge.edge_id)
        self._incident = {k: tuple(sorted(v, key=id_number)) for k, v in incident.items()}

    def __len__(self) -> int:
        return len(self.entities)

    @property
    def attributes(self) -> dict[str, tuple[str, str, str]]:
        return {eid: (e.type_label, e.name, e.description) for eid, e in self.entities.items()}

    def incident_edges(self, entity_id: str) -> tuple[str, ...]:
        if entity_id not in self._incident:
            raise NotFoundError(entity_id)
        return self._incident[entity_id]

    def degree(self, entity_id: str) -> int:
        return len(self.incident_edges(entity_id))

    def degrees(self) -> dict[str, int]:
        return {eid: len(v) for eid, v in self._incident.items()}

    def neighborhood(self, entity_id: str, hops: int = 1) -> list[Fact]:
        return neighborhood(self, entity_id, hops)

    def entity_ids(self) -> list[str]:
        return sorted(self.entities, key=id_number)


def neighborhood(snapshot: KGSnapshot, entity_id: str, hops: int = 1) -> list[Fact]:
    """Edges touching any node within ``hops - 1`` undirected steps of ``entity_id``.

    Ordered by confidence descending, then edge id.
    """
    if hops < 1:
        raise ValueError("hops must be positive")
    if entity_id not in snapshot.entities:
        raise NotFoundError(f"entity {entity_id!r} not in snapshot")
    dist = {entity_id: 0}
    queue = deque([entity_id])
    found: set[str] = set()
    while queue:
        node = queue.popleft()
        for eid in snapshot.incident_edges(node):
            found.add(eid)
            nxt = snapshot.edges[eid].other(node)
            if nxt not in dist and dist[node] + 1 < hops:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    edges = sorted((snapshot.edges[e] for e in found), key=lambda e: (-e.confidence, id_number(e.edge_id)))
    ents = snapshot.entities
    return [Fact(ents[e.subject_id].name, e.predicate, ents[e.object_id].name, e.confidence, e.edge_id) for e in edges]


# --------------------------------------------------------------------------
# Store
# --------------------------------------------------------------------------


@dataclass
class KnowledgeGraph:
    domain_id: str
    window: tuple[datetime, datetime] | None = None
    entities: dict[str, Entity] = field(default_factory=dict)
    edges: dict[str, RelationEdge] = field(default_factory=dict)
    clock: datetime | None = None
    next_entity: int = 1
    next_edge: int = 1

    def __post_init__(self) -> None:
        self._lock = threading.RLock()
        self._edge_keys = {e.key: e.edge_id for e in self.edges.values()}

    # -- id allocation (only used inside the serialized writer) --
    def allocate_entity_id(self) -> str:
        eid = f"E{self.next_entity:06d}"
        self.next_entity += 1
        return eid

    def allocate_edge_id(self) -> str:
        rid = f"R{self.next_edge:06d}"
        self.next_edge += 1
        return rid

    def edge_for(self, key: tuple[str, str, str]) -> RelationEdge | None:
        rid = self._edge_keys.get(key)
        return self.edges.get(rid) if rid else None

    def check_domain(self, domain_id: str) -> None:
        if domain_id != self.domain_id:
            raise DomainMismatchError(f"graph belongs to domain {self.domain_id!r}, not {domain_id!r}")

    def commit(self, entities: Mapping[str, Entity], edges: Mapping[str, RelationEdge],
               clock: datetime | None, next_entity: int, next_edge: int) -> None:
        """Install a validated batch of changes in one step."""
        with self._lock:
            self.entities.update(entities)
            self.edges.update(edges)
            for edge in edges.values():
                self._edge_keys[edge.key] = edge.edge_id
            if clock is not None and (self.clock is None or clock > self.clock):
                self.clock = clock
                # recency moved for every edge, not just the touched ones
                self.edges = {rid: e.rescored(clock) for rid, e in self.edges.items()}
            self.next_entity = next_entity
            self.next_edge = next_edge

    def validate(self) -> None:
        for edge in self.edges.values():
            if edge.subject_id not in self.entities or edge.object_id not in self.entities:
                raise GraphError(f"edge {edge.edge_id} references a missing entity")

    def snapshot_at(self, t: datetime) -> KGSnapshot:
        with self._lock:
            ents = {}
            for eid, ent in self.entities.items():
                view = ent.as_of(t)
                if view is not None:
                    ents[eid] = view
            edges = {}
            for rid, edge in self.edges.items():
                view = edge.as_of(t)
                if view is not None and view.subject_id in ents and view.object_id in ents:
                    edges[rid] = view
        return KGSnapshot(t, ents, edges)

    def snapshot(self) -> KGSnapshot:
        """Snapshot at the graph clock (the newest document seen)."""
        with self._lock:
            if self.clock is None:
                return KGSnapshot(_EPOCH, {}, {})
            return KGSnapshot(self.clock, self.entities, self.edges)

    # -- persistence --
    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "domain_id": self.domain_id,
            "window": [format_time(w) for w in self.window] if self.window else None,
            "as_of": format_time(self.clock) if self.clock else None,
            "next_entity": self.next_entity,
            "next_edge": self.next_edge,
            "entity_count": len(self.entities),
            "edge_count": len(self.edges),
        }

    def entity_rows(self) -> list[dict]:
        return [self.entities[k].to_json() for k in sorted(self.entities, key=id_number)]

    def edge_rows(self) -> list[dict]:
        return [self.edges[k].to_json() for k in sorted(self.edges, key=id_number)]

    def canonical_serialization(self) -> str:
        with self._lock:
            lines = [dumps(self.manifest())]
            lines += [dumps(r) for r in self.entity_rows()]
            lines += [dumps(r) for r in self.edge_rows()]
        return "\n".join(lines) + "\n"

    def persist(self, directory: str | Path) -> None:
        directory = Path(directory)
        with self._lock:
            write_jsonl(directory / "entities.jsonl", self.entity_rows())
            write_jsonl(directory / "relations.jsonl", self.edge_rows())
            write_json(directory / "manifest.json", self.manifest())

    @classmethod
    def load(cls, directory: str | Path) -> "KnowledgeGraph":
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json")
        version = manifest.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"graph schema version {version!r} is not supported (expected {SCHEMA_VERSION})")
        window = tuple(parse_time(w) for w in manifest["window"]) if manifest.get("window") else None
        entities = {}
        for lineno, row in _rows(directory / "entities.jsonl"):
            try:
                ent = Entity.from_json(row)
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{directory / 'entities.jsonl'}:{lineno}: {exc}") from exc
            entities[ent.entity_id] = ent
        edges = {}
        for lineno, row in _rows(directory / "relations.jsonl"):
            try:
                edge = RelationEdge.from_json(row)
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{directory / 'relations.jsonl'}:{lineno}: {exc}") from exc
            edges[edge.edge_id] = edge
        if len(entities) != manifest["entity_count"]:
            raise FormatError(f"{directory / 'entities.jsonl'}:{len(entities) + 1}: expected "
                              f"{manifest['entity_count']} entities, found {len(entities)} (truncated?)")
        if len(edges) != manifest["edge_count"]:
            raise FormatError(f"{directory / 'relations.jsonl'}:{len(edges) + 1}: expected "
                              f"{manifest['edge_count']} relations, found {len(edges)} (truncated?)")
        graph = cls(
            manifest["domain_id"], window, entities, edges,
            parse_time(manifest["as_of"]) if manifest.get("as_of") else None,
            int(manifest["next_entity"]), int(manifest["next_edge"]),
        )
        graph.validate()
        return graph


_EPOCH = parse_time("1970-01-01T00:00:00Z")


def _rows(path: Path):
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
