from __future__ import annotations

import random
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from benchforge.corpus import Corpus
from benchforge.paths import (
    HIGH_DEGREE,
    EvidenceError,
    ReasoningPath,
    SamplingPolicy,
    degree_threshold,
    gather_evidence,
    sample_path,
    simple_paths,
)

from builders import day, document, random_graph, snapshot_from


def triangle():
    return snapshot_from(["a", "b", "c"], [(0, "uses", 1), (1, "uses", 2), (2, "uses", 0)])


def star_plus_chain():
    # hub H(0) with leaves 1..5, chain 1-6-7-8: degrees [5,2,1,1,1,1,2,2,1]
    triples = [(0, "uses", i) for i in range(1, 6)] + [(1, "extends", 6), (6, "extends", 7), (7, "extends", 8)]
    return snapshot_from([f"n{i}" for i in range(9)], triples)


def exact_walk_distribution(snapshot, k):
    """Uniform start over non-isolated nodes, uniform incident edge to an unvisited node, conditioned on length k."""
    starts = [e for e in snapshot.entity_ids() if snapshot.degree(e) > 0]
    probs: dict[tuple, Fraction] = {}

    def walk(nodes, rels, p):
        if len(rels) == k:
            probs[(tuple(nodes), tuple(rels))] = p
            return
        options = [r for r in snapshot.incident_edges(nodes[-1]) if snapshot.edges[r].other(nodes[-1]) not in nodes]
        for r in options:
            walk(nodes + [snapshot.edges[r].other(nodes[-1])], rels + [r], p / len(options))

    for s in starts:
        walk([s], [], Fraction(1, len(starts)))
    total = sum(probs.values())
    return {key: v / total for key, v in probs.items()}


# [DERIVED] triangle: 3 starts x 2 first edges x 1 second edge, each 1/6
def test_triangle_exact_distribution():
    dist = exact_walk_distribution(triangle(), 2)
    assert len(dist) == 6 and set(dist.values()) == {Fraction(1, 6)}
    assert set(dist) == set(simple_paths(triangle(), 2))


def test_triangle_empirical_tv():
    snap = triangle()
    rng = random.Random(11)
    policy = SamplingPolicy((2, 2))
    counts = Counter()
    n = 3000
    for _ in range(n):
        p = sample_path(snap, policy, rng)
        counts[(p.nodes, p.relations)] += 1
    exact = exact_walk_distribution(snap, 2)
    tv = 0.5 * sum(abs(counts[key] / n - float(pr)) for key, pr in exact.items())
    assert tv <= 0.05


# [DERIVED] nearest-rank 0.9 quantile of 9 degrees is the 9th smallest
def test_degree_threshold_nearest_rank():
    assert degree_threshold(star_plus_chain(), 0.9) == 5
    assert degree_threshold(star_plus_chain(), 0.5) == 1
    assert degree_threshold(snapshot_from([], []), 0.9) == 0


@pytest.mark.parametrize("k", [2, 3])
def test_high_degree_paths_cross_hub(k):
    snap = star_plus_chain()
    rng = random.Random(k)
    policy = SamplingPolicy((k, k), HIGH_DEGREE, 0.9)
    for _ in range(300):
        path = sample_path(snap, policy, rng)
        assert "E000001" in path.intermediates


def test_sampler_returns_none_when_impossible():
    snap = snapshot_from(["a", "b"], [(0, "uses", 1)])
    assert sample_path(snap, SamplingPolicy((2, 2), max_attempts=20), random.Random(0)) is None
    isolated = snapshot_from(["a"], [])
    assert sample_path(isolated, SamplingPolicy(), random.Random(0)) is None
    with pytest.raises(ValueError):
        sample_path(snapshot_from([], []), SamplingPolicy(), random.Random(0))


def test_policy_validation():
    for bad in (dict(k_range=(0, 2)), dict(k_range=(3, 2)), dict(bias="weird"), dict(degree_percentile=1.0),
                dict(max_attempts=0)):
        with pytest.raises(ValueError):
            SamplingPolicy(**bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_sampled_paths_are_valid(seed, k):
    graph = random_graph(30, 60, seed=seed % 7)
    snap = graph.snapshot_at(day(200))
    path = sample_path(snap, SamplingPolicy((1, k)), random.Random(seed))
    if path is None:
        return
    assert 1 <= path.k <= k and len(set(path.nodes)) == len(path.nodes)
    for (a, b), rid, direction in zip(zip(path.nodes, path.nodes[1:]), path.relations, path.hop_directions):
        e = snap.edges[rid]
        assert {e.subject_id, e.object_id} == {a, b}
        assert direction == ("forward" if e.subject_id == a else "inverse")
    # every evidence timestamp is visible at the snapshot, and the issue time is the latest one
    assert all(ev.submitted_at <= snap.as_of for ev in path.evidence)
    assert path.issue_time == max(ev.submitted_at for ev in path.evidence)
    assert ReasoningPath.from_json(path.to_json()) == path


def test_same_seed_same_path():
    snap = random_graph(30, 60, seed=2).snapshot()
    draw = lambda: [sample_path(snap, SamplingPolicy((1, 3)), rng) for rng in [random.Random(5)] for _ in range(20)]  # noqa: E731
    assert draw() == draw()


def test_gather_evidence_and_errors():
    snap = snapshot_from(["a", "b"], [(0, "uses", 1)])
    path = sample_path(snap, SamplingPolicy((1, 1)), random.Random(0))
    text = "a uses b and more words to cover the span"
    corpus = Corpus("d", [document(f"d{i}", day(0), {"abstract": text}) for i in range(3)])
    bundle = gather_evidence(path, corpus)
    assert len(bundle) == len({e.key for e in path.evidence})
    assert all(item.text == text[item.ref.start:item.ref.end] for item in bundle.items)
    with pytest.raises(EvidenceError):
        gather_evidence(path, Corpus("d", [document("d9", day(0), {"abstract": text})]))
    with pytest.raises(EvidenceError):
        gather_evidence(path, Corpus("d", [document(f"d{i}", day(0), {"abstract": "ab"}) for i in range(3)]))
