"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""

from __future__ import annotations

import json
import math
import random
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from benchforge.alignment import (
    CandidateEntity,
    EntityIndex,
    PredicateSchema,
    RelationNormalizer,
    align_entity,
    apply_update,
    compose_key,
    extract_corpus,
)
from benchforge.evaluation import EmbeddingMatcher, Prediction, fact_recovery_rate, run_benchmark
from benchforge.gateway import loglog_slope, trigram_embed
from benchforge.graph import Entity, EvidenceRecord, KnowledgeGraph, Mention, RelationEdge
from benchforge.hnsw import HNSWIndex
from benchforge.paths import HIGH_DEGREE, SamplingPolicy, sample_path
from benchforge.qa import QAPair, QuestionType
from benchforge.qc import check_context_independence, deduplicate
from benchforge.serde import parse_time
from benchforge.synthetic import (
    WINDOW,
    build_documents,
    build_world,
    dropped_facts,
    extraction_script,
    planted_facts,
    schema_json,
)

from builders import day, mock_gateway, random_graph
from test_paths import exact_walk_distribution, star_plus_chain, triangle
from test_qc import BLOCKED, CLUSTERS

MOCK_DIM = 256


def verdict(capsys, number: int, title: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}")
    assert ok, detail


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def synthetic_graph(drop=(), order_seed: int | None = None) -> KnowledgeGraph:
    """Graph built from the synthetic corpus with a scripted extractor."""
    world = build_world()
    docs, mentions = build_documents(world)
    gateway = mock_gateway(extraction_script(world, mentions, drop))
    schema = PredicateSchema.from_json(schema_json())
    batches, failures = extract_corpus(docs, gateway, schema, 1)
    assert not failures
    if order_seed is not None:
        random.Random(order_seed).shuffle(batches)
    graph = KnowledgeGraph("synthetic-ai", tuple(parse_time(x) for x in WINDOW))
    index = EntityIndex(trigram_embed, MOCK_DIM)
    apply_update(graph, index, batches, RelationNormalizer(schema, trigram_embed, 0.6), 0.85, "synthetic-ai")
    return graph


# 1 ----------------------------------------------------------------------------


def test_c01_closed_loop_pipeline(pipeline_run, capsys):
    out, results, seconds = pipeline_run
    rows = read_jsonl(out / "benchmark.jsonl")[1:]
    types = Counter(r["qtype"] for r in rows)
    missing = [q.value for q in QuestionType if types[q.value] < 1]
    stages_passed: dict[str, set] = {}
    for r in read_jsonl(out / "qc_report.jsonl"):
        if r["outcome"] == "pass":
            stages_passed.setdefault(r["qa_id"], set()).add(r["stage"])
    all_qc = all(stages_passed.get(r["qa_id"]) == {"independence", "answerability", "clarity", "dedup"}
                 for r in rows)
    ok = not missing and all_qc and seconds < 60
    verdict(capsys, 1, "closed-loop pipeline", ok,
            f"{len(rows)} pairs, types={dict(sorted(types.items()))}, all QC stages passed={all_qc}, "
            f"serial runtime {seconds:.2f}s (< 60s)")


# 2 ----------------------------------------------------------------------------


def test_c02_contamination_gates(pipeline_run, capsys):
    out, _, _ = pipeline_run
    t_end = parse_time(WINDOW[1])
    pairs = {r["qa_id"]: r for r in read_jsonl(out / "benchmark.jsonl")[1:]}
    pair_bad = 0
    for r in pairs.values():
        t_i = parse_time(r["issue_time"])
        evidence = [parse_time(e["submitted_at"]) for e in r["evidence_refs"]]
        if not evidence or max(evidence) > t_i or t_i > t_end:
            pair_bad += 1
    audits = 0
    audit_bad = 0
    for p in read_jsonl(out / "predictions.jsonl"):
        t_q = parse_time(pairs[p["qa_id"]]["issue_time"])
        stamps = [c["submitted_at"] for c in p["audit"]["chunks"]] + [f["first_seen"] for f in p["audit"]["facts"]]
        audits += len(stamps)
        audit_bad += sum(parse_time(s) > t_q for s in stamps)
    ok = pair_bad == 0 and audit_bad == 0 and audits > 0
    verdict(capsys, 2, "contamination gates", ok,
            f"{len(pairs) - pair_bad}/{len(pairs)} pairs within [evidence, T_end]; "
            f"{audits - audit_bad}/{audits} audited items at or before t_q")


# 3 ----------------------------------------------------------------------------


def test_c03_snapshot_monotonicity(capsys):
    graph = random_graph(300, 1000, seed=3, days=300)
    rng = random.Random(3)
    violations = 0
    for _ in range(50):
        a, b = sorted((day(rng.uniform(-10, 340)), day(rng.uniform(-10, 340))))
        s, s2 = graph.snapshot_at(a), graph.snapshot_at(b)
        if not (set(s.entities) <= set(s2.entities) and set(s.edges) <= set(s2.edges)):
            violations += 1
    verdict(capsys, 3, "snapshot monotonicity", violations == 0,
            f"{violations} violations over 50 pairs on {len(graph.edges)} edges")


# 4 ----------------------------------------------------------------------------


def _names(rng: random.Random, n: int) -> list[str]:
    syl = ("ka", "lo", "mi", "ren", "tus", "vor", "ax", "bel", "cor", "dan", "eph", "fin", "gal", "hex", "ion", "jor")
    return ["".join(rng.choice(syl) for _ in range(4)) + " " + "".join(rng.choice(syl) for _ in range(3))
            for _ in range(n)]


def test_c04_ann_alignment_fidelity(capsys):
    rng = random.Random(4)
    start = time.perf_counter()
    index = HNSWIndex(MOCK_DIM, capacity=1000)
    keys, vecs = [], []
    for i, name in enumerate(_names(rng, 1000)):
        v = trigram_embed(compose_key("method", name, "indexed entity"))
        index.add(f"E{i + 1:06d}", v)
        keys.append(f"E{i + 1:06d}")
        vecs.append(v)
    matrix = np.vstack(vecs)
    hits = 0
    for name in _names(rng, 200):
        q = trigram_embed(compose_key("method", name, "indexed entity"))
        exact = float(np.max(matrix @ q))
        top = index.search(q, 1)
        hits += bool(top) and abs(top[0][1] - exact) <= 1e-5
    seconds = time.perf_counter() - start
    ok = hits >= 190 and seconds < 10
    verdict(capsys, 4, "ANN alignment fidelity", ok,
            f"top-1 agrees with exhaustive scan on {hits}/200 queries ({hits / 2:.1f}% >= 95%), "
            f"{seconds:.2f}s (< 10s)")


# 5 ----------------------------------------------------------------------------


def test_c05_alignment_order_independence(capsys):
    reference = synthetic_graph().canonical_serialization()
    distinct = {synthetic_graph(order_seed=s).canonical_serialization() for s in range(10)}
    ok = distinct == {reference}
    verdict(capsys, 5, "alignment order independence", ok,
            f"{len(distinct | {reference})} distinct serialization(s) over 10 shuffles")


# 6 ----------------------------------------------------------------------------


@pytest.mark.slow
def test_c06_sublinear_alignment_scaling(pipeline_run, capsys):
    rng = random.Random(6)
    probes = [CandidateEntity("method", n, "probe entity", "abstract", 0, 5) for n in _names(rng, 200)]
    probe_vecs = [trigram_embed(compose_key(c.type_label, c.name, c.description)) for c in probes]
    sizes, times = [1000, 4000, 16000], []
    for n in sizes:
        index = EntityIndex(trigram_embed, MOCK_DIM, capacity=n)
        for i, name in enumerate(_names(rng, n)):
            index.add(f"E{i + 1:06d}", trigram_embed(compose_key("method", name, "indexed entity")))
        best = math.inf
        for _ in range(3):
            start = time.perf_counter()
            for c, v in zip(probes, probe_vecs):
                align_entity(c, index, 0.85, vector=v)
            best = min(best, time.perf_counter() - start)
        times.append(best)
    slope = loglog_slope(sizes, times)
    out, _, _ = pipeline_run
    token_slope = json.loads((out / "stats.json").read_text())["scaling"]["token_slope"]
    ok = slope <= 0.5 and abs(token_slope - 1.0) <= 0.05
    verdict(capsys, 6, "sublinear alignment scaling", ok,
            f"align time {[round(t * 1000, 1) for t in times]} ms at N={sizes}, log-log slope {slope:.3f} (<= 0.5); "
            f"token slope {token_slope:.4f} (1.0 +/- 0.05)")


# 7 ----------------------------------------------------------------------------


def test_c07_path_sampler_distribution(capsys):
    snap = triangle()
    rng = random.Random(7)
    n = 10_000
    counts = Counter()
    for _ in range(n):
        p = sample_path(snap, SamplingPolicy((2, 2)), rng)
        counts[(p.nodes, p.relations)] += 1
    exact = exact_walk_distribution(snap, 2)
    tv = 0.5 * sum(abs(counts[k] / n - float(v)) for k, v in exact.items())
    tv += 0.5 * sum(c / n for k, c in counts.items() if k not in exact)

    star = star_plus_chain()
    total = crossing = 0
    for k in (2, 3):
        policy = SamplingPolicy((k, k), HIGH_DEGREE, 0.9)
        for _ in range(500):
            path = sample_path(star, policy, rng)
            total += 1
            crossing += path is not None and any(star.degree(e) >= 5 for e in path.intermediates)
    ok = tv <= 0.05 and crossing == total
    verdict(capsys, 7, "path sampler distribution", ok,
            f"triangle TV {tv:.4f} (<= 0.05); {crossing}/{total} high-degree paths cross a hub")


# 8 ----------------------------------------------------------------------------


def test_c08_fact_recovery_closed_loop(capsys):
    world = build_world()
    facts = [f.text() for f in planted_facts(world)]
    matcher = EmbeddingMatcher(trigram_embed, 0.75)
    lossy = fact_recovery_rate(synthetic_graph(drop=dropped_facts(world)), facts, matcher)
    full = fact_recovery_rate(synthetic_graph(), facts, matcher)
    ok = abs(lossy - 10 / 15) <= 0.001 and full == 1.0
    verdict(capsys, 8, "fact recovery closed loop", ok,
            f"lossy extractor {lossy:.4f} (0.667 +/- 0.001), full extractor {full:.3f} (1.000)")


# 9 ----------------------------------------------------------------------------


class _Fixed:
    name = "Fixed"

    def answer(self, ctx):
        return Prediction(ctx.qa.qa_id, self.name, ctx.run_index, f"guess {ctx.run_index}")


def _tiny_graph() -> KnowledgeGraph:
    g = KnowledgeGraph("dom")
    ents = {f"E{i:06d}": Entity.from_mentions(f"E{i:06d}", [Mention(day(1), "d1", "abstract", 0, 5, n, "method", n)])
            for i, n in ((1, "Alpha"), (2, "Beta"))}
    edge = RelationEdge.build("R000001", "E000001", "uses", "E000002",
                              [EvidenceRecord(day(1), "d1", "abstract", 0, 10)], day(1))
    g.commit(ents, {"R000001": edge}, day(20), 3, 2)
    return g


def test_c09_evaluation_arithmetic(capsys):
    qtypes = [QuestionType.SingleHop] * 2 + [QuestionType.OpenEnded] * 3
    pairs = [QAPair(f"Q{i + 1:06d}", "dom", qt, f"Which item does Alpha use, case {i}?", "Beta", day(10),
                    "P000001", ()) for i, qt in enumerate(qtypes)]
    # run 0: Q1, Q3 correct (2/5); run 1: Q1, Q2, Q3 correct (3/5)
    correct = {0: {"Q000001", "Q000003"}, 1: {"Q000001", "Q000002", "Q000003"}}
    script = {f"judge:Fixed:{p.qa_id}:{r}": {"verdict": "correct" if p.qa_id in correct[r] else "incorrect"}
              for p in pairs for r in (0, 1)}
    report = run_benchmark([_Fixed()], pairs, _tiny_graph(), None, mock_gateway(script), runs=2).report
    overall = report.accuracy("Fixed")
    single = report.accuracy("Fixed", "SingleHop")["runs"]
    open_ended = report.accuracy("Fixed", "OpenEnded")["runs"]
    identity = all(overall["runs"][r] == (2 * single[r] + 3 * open_ended[r]) / 5 for r in range(2))
    ok = (single == [50.0, 100.0] and open_ended == [100 / 3, 100 / 3] and overall["runs"] == [40.0, 60.0]
          and overall["mean"] == 50.0 and overall["std"] == 10.0 and identity)
    verdict(capsys, 9, "evaluation arithmetic", ok,
            f"per-run {overall['runs']}, mean {overall['mean']}, std {overall['std']}, "
            f"count-weighted identity exact={identity}")


# 10 ---------------------------------------------------------------------------


def test_c10_determinism(pipeline_run, bundle_dir, tmp_path, capsys):
    from benchforge.config import load_config
    from benchforge.pipeline import Pipeline

    first, _, _ = pipeline_run
    second = tmp_path / "run2"
    Pipeline(load_config(bundle_dir / "config.json"), second, workers=1).run_all()
    a = {k: v for k, v in tree(first).items() if k != "inspection_sample.jsonl" and "export-sample" not in k}
    b = tree(second)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing and "report.json" in a
    verdict(capsys, 10, "determinism", ok,
            f"{len(a)} artifacts compared, {len(differing)} differ {differing[:3]}")


# 11 ---------------------------------------------------------------------------


def test_c11_qc_filters(capsys):
    pairs = [QAPair(f"Q{i + 1:06d}", "dom", QuestionType.SingleHop, q, "X", day(1), "P000001", ())
             for i, q in enumerate(BLOCKED)]
    rejected = sum(not check_context_independence(p).passed for p in pairs)
    rng = random.Random(11)
    kept_sets = set()
    for _ in range(20):
        order = list(CLUSTERS)
        rng.shuffle(order)
        batch = [QAPair(i, "dom", QuestionType.SingleHop, q, "X", day(1), "P000001", ()) for i, q in order]
        kept, _ = deduplicate(batch, trigram_embed, 0.92)
        kept_sets.add(tuple(p.qa_id for p in kept))
    ok = rejected == len(BLOCKED) and kept_sets == {("Q000001", "Q000004", "Q000006")}
    verdict(capsys, 11, "QC filters", ok,
            f"{rejected}/{len(BLOCKED)} blocklist fixtures rejected; dedup kept {sorted(kept_sets)} "
            f"over 20 orders (3 clusters)")
