"""Small constructors shared by the test modules."""

from __future__ import annotations

import random
from datetime import datetime, timedelta, timezone

from benchforge.corpus import Document, Section
from benchforge.gateway import Gateway, MockBackend
from benchforge.graph import Entity, EvidenceRecord, KGSnapshot, KnowledgeGraph, Mention, RelationEdge

BASE = datetime(2025, 1, 1, tzinfo=timezone.utc)


def day(n: float) -> datetime:
    # whole seconds, matching the serialized timestamp precision
    return BASE + timedelta(seconds=round(n * 86400))


def mention(name: str, t: datetime, doc_id: str = "d1", etype: str = "method", desc: str = "",
            section: str = "abstract", start: int = 0) -> Mention:
    return Mention(t, doc_id, section, start, start + max(1, len(name)), name, etype, desc or f"about {name}")


def entity(eid: str, name: str, t: datetime, etype: str = "method", **kw) -> Entity:
    return Entity.from_mentions(eid, [mention(name, t, etype=etype, **kw)])


def evidence(t: datetime, doc_id: str = "d1", start: int = 0, count: int = 1) -> EvidenceRecord:
    return EvidenceRecord(t, doc_id, "abstract", start, start + 10, count)


def edge(rid: str, s: str, p: str, o: str, times: list[datetime], now: datetime | None = None) -> RelationEdge:
    evs = [evidence(t, doc_id=f"d{i}", start=i) for i, t in enumerate(times)]
    return RelationEdge.build(rid, s, p, o, evs, now or max(times))


def snapshot_from(names: list[str], triples: list[tuple[int, str, int]], t: datetime | None = None,
                  etypes: list[str] | None = None) -> KGSnapshot:
    """Snapshot with entities ``E000001..`` and edges ``R000001..`` given as index triples."""
    t = t or day(10)
    ents = {}
    for i, name in enumerate(names):
        ents[f"E{i + 1:06d}"] = entity(f"E{i + 1:06d}", name, day(0), etype=(etypes[i] if etypes else "method"))
    edges = {}
    for j, (s, p, o) in enumerate(triples):
        rid = f"R{j + 1:06d}"
        edges[rid] = edge(rid, f"E{s + 1:06d}", p, f"E{o + 1:06d}", [day(1)], t)
    return KGSnapshot(t, ents, edges)


def random_graph(n_entities: int, n_edges: int, seed: int = 0, days: int = 300) -> KnowledgeGraph:
    """Graph with random provenance and evidence times spread over ``days``."""
    rng = random.Random(seed)
    graph = KnowledgeGraph("toy", None)
    ents = {}
    for i in range(n_entities):
        eid = f"E{i + 1:06d}"
        times = sorted(day(rng.uniform(0, days)) for _ in range(rng.randint(1, 3)))
        ents[eid] = Entity.from_mentions(eid, [mention(f"entity {i}", t, doc_id=f"d{k}", start=k)
                                               for k, t in enumerate(times)])
    ids = list(ents)
    edges = {}
    keys = set()
    while len(edges) < n_edges:
        s, o = rng.sample(ids, 2)
        p = rng.choice(("uses", "extends", "evaluates_on"))
        if (s, p, o) in keys:
            continue
        keys.add((s, p, o))
        rid = f"R{len(edges) + 1:06d}"
        lo = max(ents[s].first_seen, ents[o].first_seen)
        times = [lo + timedelta(seconds=rng.randint(0, 30 * 86400)) for _ in range(rng.randint(1, 3))]
        edges[rid] = RelationEdge.build(rid, s, p, o, [evidence(t, doc_id=f"x{k}", start=k)
                                                      for k, t in enumerate(times)], max(times))
    clock = max([e.last_seen for e in edges.values()] + [e.provenance[-1].submitted_at for e in ents.values()])
    graph.commit(ents, edges, clock, n_entities + 1, n_edges + 1)
    return graph


def document(doc_id: str, t: datetime, sections: dict[str, str], title: str = "", categories=("cs.AI",)) -> Document:
    return Document(doc_id, title or f"title {doc_id}", ("A. Author",), tuple(categories), t,
                    tuple(Section(k, v) for k, v in sections.items()))


def mock_gateway(script: dict | None = None, responders: dict | None = None) -> Gateway:
    return Gateway(MockBackend(script or {}, responders or {}), sleep=lambda s: None)
