from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from benchforge.graph import (
    Entity,
    GraphError,
    KGSnapshot,
    KnowledgeGraph,
    NotFoundError,
    RelationEdge,
    SchemaVersionError,
    score_confidence,
)
from benchforge.serde import FormatError

from builders import day, edge, entity, evidence, mention, random_graph, snapshot_from


# [DERIVED] hand-evaluated blend: f=3, support=2, 90 days stale
def test_confidence_oracle():
    expected = 0.4 * (math.log(4) / math.log(17)) + 0.3 * math.exp(-0.5) + 0.3 * (2 / 3)
    assert score_confidence(3, 2, day(0), day(90)) == pytest.approx(expected, abs=1e-12)


# [TRIVIAL] component caps
def test_confidence_caps():
    assert score_confidence(16, 3, day(5), day(5)) == pytest.approx(1.0)
    assert score_confidence(10_000, 50, day(5), day(5)) == pytest.approx(1.0)
    # future last_seen is treated as fresh
    assert score_confidence(16, 3, day(9), day(5)) == pytest.approx(1.0)


@given(st.integers(1, 100), st.integers(1, 10), st.floats(0, 5000))
def test_confidence_in_unit_interval(freq, support, days):
    assert 0.0 <= score_confidence(freq, support, day(0), day(days)) <= 1.0


@given(st.integers(1, 40), st.integers(1, 5), st.floats(0, 400), st.floats(0, 400))
def test_confidence_monotone_in_staleness(freq, support, a, b):
    lo, hi = sorted((a, b))
    assert score_confidence(freq, support, day(0), day(lo)) >= score_confidence(freq, support, day(0), day(hi))


def test_edge_build_merges_duplicate_spans():
    e = RelationEdge.build("R000001", "E000001", "uses", "E000002",
                           [evidence(day(1)), evidence(day(1)), evidence(day(3), doc_id="d2")], day(3))
    assert len(e.evidence) == 2 and e.frequency == 3
    assert e.first_seen == day(1) and e.last_seen == day(3)
    assert e.confidence == pytest.approx(score_confidence(3, 2, day(3), day(3)))


def test_edge_invariants():
    with pytest.raises(GraphError):
        RelationEdge("R1", "a", "p", "b", (), 0.5)
    with pytest.raises(GraphError):
        RelationEdge("R1", "a", "p", "b", (evidence(day(0)),), 1.5)


def test_entity_attributes_from_earliest_mention():
    ent = Entity.from_mentions("E000001", [mention("Later Name", day(5), desc="short"),
                                           mention("First Name", day(1), desc="a much longer description")])
    assert ent.name == "First Name" and ent.aliases == ("Later Name",)
    assert ent.description == "a much longer description"
    assert ent.first_seen == day(1)
    assert ent.as_of(day(0)) is None
    early = ent.as_of(day(2))
    assert early.name == "First Name" and early.aliases == () and len(early.provenance) == 1


def test_snapshot_rejects_dangling_edge():
    with pytest.raises(GraphError):
        KGSnapshot(day(1), {"E000001": entity("E000001", "a", day(0))},
                   {"R000001": edge("R000001", "E000001", "uses", "E000002", [day(0)])})


def test_neighborhood_hops_and_order():
    snap = snapshot_from(["a", "b", "c", "d"], [(0, "uses", 1), (1, "uses", 2), (2, "uses", 3)])
    one = snap.neighborhood("E000001", 1)
    assert [(f.subject, f.object) for f in one] == [("a", "b")]
    two = snap.neighborhood("E000002", 2)
    assert {f.edge_id for f in two} == {"R000001", "R000002", "R000003"}
    with pytest.raises(NotFoundError):
        snap.neighborhood("E000099")
    with pytest.raises(ValueError):
        snap.neighborhood("E000001", 0)
    assert snap.degree("E000002") == 2


def _snapshot_subset(a: KGSnapshot, b: KGSnapshot) -> bool:
    if not set(a.entities) <= set(b.entities) or not set(a.edges) <= set(b.edges):
        return False
    for rid, e in a.edges.items():
        if not set(e.evidence) <= set(b.edges[rid].evidence):
            return False
    for eid, ent in a.entities.items():
        if not set(ent.provenance) <= set(b.entities[eid].provenance):
            return False
    return True


@pytest.fixture(scope="module")
def toy_graph():
    return random_graph(60, 150, seed=5)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 400), st.floats(-10, 400))
def test_snapshot_monotone(toy_graph, a, b):
    t1, t2 = sorted((day(a), day(b)))
    assert _snapshot_subset(toy_graph.snapshot_at(t1), toy_graph.snapshot_at(t2))


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 400))
def test_snapshot_has_no_future_evidence(toy_graph, a):
    t = day(a)
    snap = toy_graph.snapshot_at(t)
    assert all(ev.submitted_at <= t for e in snap.edges.values() for ev in e.evidence)
    assert all(m.submitted_at <= t for e in snap.entities.values() for m in e.provenance)
    # confidence is recomputed at the snapshot time
    for e in snap.edges.values():
        assert e.confidence == pytest.approx(score_confidence(e.frequency, len(e.evidence), e.last_seen, t))


def test_commit_rescores_every_edge_on_clock_advance():
    g = KnowledgeGraph("d")
    ents = {"E000001": entity("E000001", "a", day(0)), "E000002": entity("E000002", "b", day(0))}
    g.commit(ents, {"R000001": edge("R000001", "E000001", "uses", "E000002", [day(0)])}, day(0), 3, 2)
    before = g.edges["R000001"].confidence
    g.commit({}, {}, day(180), 3, 2)
    after = g.edges["R000001"].confidence
    assert before - after == pytest.approx(0.3 * (1 - math.exp(-1)))
    g.commit({}, {}, day(10), 3, 2)  # clock never moves back
    assert g.clock == day(180)


def test_persist_load_roundtrip(tmp_path, toy_graph):
    toy_graph.persist(tmp_path)
    back = KnowledgeGraph.load(tmp_path)
    assert back.canonical_serialization() == toy_graph.canonical_serialization()
    assert back.next_entity == toy_graph.next_entity


def test_load_rejects_schema_version(tmp_path, toy_graph):
    toy_graph.persist(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["schema_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(SchemaVersionError):
        KnowledgeGraph.load(tmp_path)


def test_load_detects_truncation(tmp_path, toy_graph):
    toy_graph.persist(tmp_path)
    lines = (tmp_path / "relations.jsonl").read_text().splitlines()
    (tmp_path / "relations.jsonl").write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(FormatError, match="truncated"):
        KnowledgeGraph.load(tmp_path)


def test_load_reports_bad_line(tmp_path, toy_graph):
    toy_graph.persist(tmp_path)
    lines = (tmp_path / "entities.jsonl").read_text().splitlines()
    lines[4] = lines[4][:20]
    (tmp_path / "entities.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match=r"entities\.jsonl:5"):
        KnowledgeGraph.load(tmp_path)


def test_empty_graph_snapshot():
    snap = KnowledgeGraph("d").snapshot()
    assert len(snap) == 0 and len(snap.edges) == 0
