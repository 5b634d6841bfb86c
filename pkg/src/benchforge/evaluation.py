"""Baseline answering methods, the answer judge, reports and fact recovery.

Every prediction for a pair issued at ``t_q`` sees only the graph snapshot at
``t_q`` and chunks of documents submitted at or before ``t_q``; the audit
record of each prediction lists exactly what was injected so the gate can be
checked after the fact.
"""

from __future__ import annotations

import enum
import logging
import re
import statistics
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import prompts
from .corpus import Chunk, Corpus
from .gateway import ChatRequest, ConfigurationError, ContractViolation, Gateway, Message, TransportError, parse_json_reply
from .graph import KGSnapshot, KnowledgeGraph, id_number
from .qa import QAPair, QuestionType
from .qc import normalize_answer
from .serde import format_time

logger = logging.getLogger(__name__)

LINK_THRESHOLD = 0.5
LINK_MAX = 2
LINK_MAX_WINDOW = 4
RECOVERY_THRESHOLD = 0.75
VERDICTS = ("correct", "incorrect", "missing")


class Method(str, enum.Enum):
    IO = "IO"
    CoT = "CoT"
    SC = "SC"
    RAG = "RAG"
    OneHopKG = "OneHopKG"
    RagPlusOneHopKG = "RagPlusOneHopKG"

    @property
    def uses_chunks(self) -> bool:
        return self in (Method.RAG, Method.RagPlusOneHopKG)

    @property
    def uses_graph(self) -> bool:
        return self in (Method.OneHopKG, Method.RagPlusOneHopKG)


@dataclass(frozen=True)
class MethodParams:
    top_k: int = 3
    sc_samples: int = 5
    sc_temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.sc_samples < 3 or self.sc_samples % 2 == 0:
            raise ValueError("sc_samples must be odd and at least 3")


# --------------------------------------------------------------------------
# Retrieval
# --------------------------------------------------------------------------


class ChunkIndex:
    """Exact cosine retrieval over chunk embeddings with a per-query time mask."""

    def __init__(self, chunks: Sequence[Chunk], vectors: np.ndarray, timestamps: Sequence[datetime]) -> None:
        if len(chunks) != len(vectors) or len(chunks) != len(timestamps):
            raise ValueError("chunks, vectors and timestamps must align")
        self.chunks = list(chunks)
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.timestamps = list(timestamps)
        self._ts = np.array([t.timestamp() for t in timestamps], dtype=np.float64)

    @classmethod
    def build(cls, chunks: Sequence[Chunk], corpus: Corpus, embed: Callable[[str], np.ndarray]) -> "ChunkIndex":
        vecs = np.vstack([embed(c.text) for c in chunks]) if chunks else np.zeros((0, 1))
        return cls(chunks, vecs, [corpus.get(c.doc_id).submitted_at for c in chunks])

    def __len__(self) -> int:
        return len(self.chunks)

    def search(self, query: np.ndarray, top_k: int, as_of: datetime) -> list[tuple[Chunk, float, datetime]]:
        """Top ``top_k`` chunks of documents submitted at or before ``as_of``; ties go to index order."""
        if not self.chunks:
            return []
        allowed = np.flatnonzero(self._ts <= as_of.timestamp())
        if allowed.size == 0:
            return []
        sims = self.vectors[allowed] @ query
        order = np.lexsort((allowed, -sims))[:top_k]
        return [(self.chunks[allowed[i]], float(sims[i]), self.timestamps[allowed[i]]) for i in order]


class EntityLinker:
    """Links questions to snapshot entities by comparing word windows with entity names."""

    def __init__(self, embed: Callable[[str], np.ndarray], threshold: float = LINK_THRESHOLD,
                 max_entities: int = LINK_MAX, max_window: int = LINK_MAX_WINDOW) -> None:
        self.embed = embed
        self.threshold = threshold
        self.max_entities = max_entities
        self.max_window = max_window
        self._cache: dict[str, np.ndarray] = {}

    def _vec(self, text: str) -> np.ndarray:
        v = self._cache.get(text)
        if v is None:
            v = self._cache[text] = self.embed(text)
        return v

    def windows(self, question: str) -> list[str]:
        words = re.findall(r"[\w][\w\-.]*", question)
        out = []
        for size in range(1, self.max_window + 1):
            out += [" ".join(words[i:i + size]) for i in range(len(words) - size + 1)]
        return out

    def link(self, question: str, snapshot: KGSnapshot) -> list[tuple[str, float]]:
        ids = snapshot.entity_ids()
        wins = self.windows(question)
        if not ids or not wins:
            return []
        names = np.vstack([self._vec(snapshot.entities[e].name) for e in ids])
        wvecs = np.vstack([self._vec(w) for w in wins])
        best = (wvecs @ names.T).max(axis=0)
        ranked = sorted(((float(s), id_number(e), e) for s, e in zip(best.tolist(), ids)), key=lambda t: (-t[0], t[1]))
        return [(e, s) for s, _, e in ranked if s >= self.threshold][: self.max_entities]


# --------------------------------------------------------------------------
# Predictions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    qa_id: str
    method: str
    run_index: int
    answer: str
    chunk_audit: tuple[tuple[str, str, str], ...] = ()  # (chunk_id, doc_id, submitted_at)
    fact_audit: tuple[tuple[str, str, str], ...] = ()  # (edge_id, fact text, first_seen)
    linked_entities: tuple[str, ...] = ()
    tokens: int = 0
    latency_ms: int = 0
    failed: bool = False

    def to_json(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "method": self.method,
            "run_index": self.run_index,
            "answer": self.answer,
            "audit": {
                "chunks": [{"chunk_id": c, "doc_id": d, "submitted_at": t} for c, d, t in self.chunk_audit],
                "facts": [{"edge_id": e, "text": f, "first_seen": t} for e, f, t in self.fact_audit],
                "linked_entities": list(self.linked_entities),
            },
            "tokens": self.tokens,
            "latency_ms": self.latency_ms,
            "failed": self.failed,
        }


@dataclass
class AnswerContext:
    """Everything one method may look at for one pair."""

    qa: QAPair
    snapshot: KGSnapshot
    chunk_index: ChunkIndex | None
    gateway: Gateway
    linker: EntityLinker
    params: MethodParams
    run_index: int


class MethodAdapter(Protocol):
    name: str

    def answer(self, ctx: AnswerContext) -> Prediction: ...


STYLES = {
    Method.IO: "Reply with the answer only.",
    Method.CoT: "Think step by step, then give the final answer on the last line as 'Answer: <answer>'.",
    Method.SC: "Think step by step, then give the final answer on the last line as 'Answer: <answer>'.",
    Method.RAG: "Use the retrieved passages. Reply with the answer only.",
    Method.OneHopKG: "Use the knowledge-graph facts. Reply with the answer only.",
    Method.RagPlusOneHopKG: "Use the retrieved passages and knowledge-graph facts. Reply with the answer only.",
}


def final_answer(text: str) -> str:
    """Text after the last ``Answer:`` marker, else the whole reply."""
    idx = text.rfind("Answer:")
    body = text[idx + len("Answer:"):] if idx >= 0 else text
    return body.strip()


def fact_text(subject: str, predicate: str, obj: str) -> str:
    return f"{subject} {predicate.replace('_', ' ')} {obj}"


class BaselineMethod:
    """The six built-in prompting, retrieval and one-hop graph baselines."""

    def __init__(self, method: Method | str) -> None:
        self.method = Method(method)
        self.name = self.method.value

    def _context(self, ctx: AnswerContext) -> tuple[str, tuple, tuple, tuple]:
        parts: list[str] = []
        chunk_audit: list[tuple[str, str, str]] = []
        fact_audit: list[tuple[str, str, str]] = []
        linked: list[str] = []
        t_q = ctx.qa.issue_time
        if self.method.uses_chunks:
            if ctx.chunk_index is None:
                raise ConfigurationError(f"{self.name} needs a chunk index")
            hits = ctx.chunk_index.search(ctx.gateway.embed(ctx.qa.question), ctx.params.top_k, t_q)
            if hits:
                parts.append("Retrieved passages:")
            for chunk, _, ts in hits:
                parts.append(f"- {chunk.text}")
                chunk_audit.append((chunk.chunk_id, chunk.doc_id, format_time(ts)))
        if self.method.uses_graph:
            facts_seen: set[str] = set()
            lines: list[str] = []
            for eid, _ in ctx.linker.link(ctx.qa.question, ctx.snapshot):
                linked.append(eid)
                for fact in ctx.snapshot.neighborhood(eid, 1):
                    if fact.edge_id in facts_seen:
                        continue
                    facts_seen.add(fact.edge_id)
                    text = fact_text(fact.subject, fact.predicate, fact.object)
                    lines.append(f"- {text} (confidence {fact.confidence:.2f})")
                    fact_audit.append((fact.edge_id, text, format_time(ctx.snapshot.edges[fact.edge_id].first_seen)))
            if lines:
                parts.append("Knowledge-graph facts:")
                parts.extend(lines)
        return "\n".join(parts), tuple(chunk_audit), tuple(fact_audit), tuple(linked)

    def answer(self, ctx: AnswerContext) -> Prediction:
        context, chunk_audit, fact_audit, linked = self._context(ctx)
        system, user = prompts.load("answer").render(style=STYLES[self.method], context=context,
                                                     question=ctx.qa.question)
        base_tag = f"answer:{self.name}:{ctx.qa.qa_id}:{ctx.run_index}"
        samples = ctx.params.sc_samples if self.method is Method.SC else 1
        temperature = ctx.params.sc_temperature if self.method is Method.SC else 0.0
        answers: list[str] = []
        tokens = latency = 0
        try:
            for s in range(samples):
                tag = f"{base_tag}:{s}" if self.method is Method.SC else base_tag
                resp = ctx.gateway.complete(ChatRequest.build(system, user, tag, temperature=temperature))
                tokens += resp.total_tokens
                latency += resp.latency_ms
                answers.append(final_answer(resp.text))
        except TransportError as exc:
            logger.warning("%s failed on %s: %s", self.name, ctx.qa.qa_id, exc)
            return Prediction(ctx.qa.qa_id, self.name, ctx.run_index, "", chunk_audit, fact_audit, linked,
                              tokens, latency, failed=True)
        return Prediction(ctx.qa.qa_id, self.name, ctx.run_index, majority_vote(answers), chunk_audit,
                          fact_audit, linked, tokens, latency)


def majority_vote(answers: Sequence[str]) -> str:
    """Most frequent normalized answer; ties go to the earliest sampled one."""
    if not answers:
        return ""
    keys = [normalize_answer(a) for a in answers]
    counts = Counter(keys)
    top = max(counts.values())
    for a, k in zip(answers, keys):
        if counts[k] == top:
            return a
    return answers[0]


def answer_with_method(method: Method | str | MethodAdapter, qa: QAPair, snapshot: KGSnapshot,
                       chunk_index: ChunkIndex | None, gateway: Gateway, params: MethodParams = MethodParams(),
                       run_index: int = 0, linker: EntityLinker | None = None) -> Prediction:
    if snapshot.as_of != qa.issue_time:
        raise ContractViolation(f"snapshot at {snapshot.as_of} does not match issue time of {qa.qa_id}")
    adapter = method if hasattr(method, "answer") else BaselineMethod(method)
    ctx = AnswerContext(qa, snapshot, chunk_index, gateway, linker or EntityLinker(gateway.embed), params, run_index)
    return adapter.answer(ctx)


# --------------------------------------------------------------------------
# Judge
# --------------------------------------------------------------------------


def judge_answer(question: str, gold: str, predicted: str, gateway: Gateway, tag: str = "judge") -> str:
    """``correct``, ``incorrect`` or ``missing``; fails closed to ``incorrect``."""
    if not predicted or not predicted.strip():
        return "missing"
    if predicted == gold or normalize_answer(predicted) == normalize_answer(gold):
        return "correct"
    system, user = prompts.load("judge_answer").render(question=question, gold=gold, prediction=predicted)
    request = ChatRequest.build(system, user, tag)
    for attempt in range(2):
        try:
            response = gateway.complete(request)
        except TransportError:
            return "incorrect"
        try:
            verdict = parse_json_reply(response.text)["verdict"]
            if verdict not in VERDICTS:
                raise ValueError(f"unknown verdict {verdict!r}")
            return verdict
        except (ValueError, KeyError, TypeError) as exc:
            if attempt == 0:
                _, fix = prompts.load("repair").render(error=str(exc)[:200])
                request = ChatRequest(request.messages + (Message("assistant", response.text or "(empty)"),
                                                          Message("user", fix)), tag=tag)
    return "incorrect"


# --------------------------------------------------------------------------
# Benchmark runs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VerdictRecord:
    qa_id: str
    method: str
    run_index: int
    qtype: str
    verdict: str

    def to_json(self) -> dict:
        return {"qa_id": self.qa_id, "method": self.method, "run_index": self.run_index, "qtype": self.qtype,
                "verdict": self.verdict}


@dataclass
class Report:
    runs: int
    pair_counts: dict[str, int]
    # method -> qtype -> per-run correct counts
    correct: dict[str, dict[str, list[int]]] = field(default_factory=dict)

    @staticmethod
    def _stats(values: Sequence[float]) -> dict:
        return {"mean": statistics.fmean(values), "std": statistics.pstdev(values), "runs": list(values)}

    def accuracy(self, method: str, qtype: str | None = None) -> dict:
        per_type = self.correct[method]
        if qtype is not None:
            n = self.pair_counts[qtype]
            return self._stats([100.0 * c / n for c in per_type[qtype]])
        total = sum(self.pair_counts.values())
        per_run = [sum(per_type[q][r] for q in per_type) for r in range(self.runs)]
        return self._stats([100.0 * c / total for c in per_run])

    def to_json(self) -> dict:
        methods = {}
        for method in self.correct:
            methods[method] = {
                "per_type": {q: {**self.accuracy(method, q), "correct": self.correct[method][q]}
                             for q in self.correct[method]},
                "overall": self.accuracy(method),
            }
        return {"runs": self.runs, "pair_counts": dict(self.pair_counts), "methods": methods}


def build_report(records: Iterable[VerdictRecord], pairs: Sequence[QAPair], methods: Sequence[str],
                 runs: int) -> Report:
    counts = Counter(p.qtype.value for p in pairs)
    qtypes = [q.value for q in QuestionType if counts[q.value]]
    report = Report(runs, {q: counts[q] for q in qtypes})
    for m in methods:
        report.correct[m] = {q: [0] * runs for q in qtypes}
    for r in records:
        if r.verdict == "correct":
            report.correct[r.method][r.qtype][r.run_index] += 1
    return report


@dataclass
class EvaluationResult:
    predictions: list[Prediction]
    verdicts: list[VerdictRecord]
    report: Report


def run_benchmark(methods: Sequence[Method | str | MethodAdapter], pairs: Sequence[QAPair], graph: KnowledgeGraph,
                  chunk_index: ChunkIndex | None, gateway: Gateway, runs: int = 5,
                  params: MethodParams = MethodParams(), workers: int = 1,
                  linker: EntityLinker | None = None) -> EvaluationResult:
    """Answer and judge every ``(method, pair, run)``; report per-type mean and population std."""
    if runs < 1:
        raise ConfigurationError("runs must be at least 1")
    if not pairs:
        raise ConfigurationError("benchmark is empty")
    adapters = [m if hasattr(m, "answer") else BaselineMethod(m) for m in methods]
    names = [a.name for a in adapters]
    if len(set(names)) != len(names):
        raise ConfigurationError("duplicate method names")
    for a in adapters:
        if isinstance(a, BaselineMethod) and a.method.uses_chunks and chunk_index is None:
            raise ConfigurationError(f"{a.name} needs a chunk index")
    # every pair must have a valid snapshot before any call is made
    for qa in pairs:
        if graph.clock is None or qa.issue_time > graph.clock:
            raise ConfigurationError(f"{qa.qa_id}: no snapshot available at {format_time(qa.issue_time)}")
        if graph.window and not graph.window[0] <= qa.issue_time <= graph.window[1]:
            raise ConfigurationError(f"{qa.qa_id}: issue time outside the corpus window")
    snapshots = {t: graph.snapshot_at(t) for t in sorted({qa.issue_time for qa in pairs})}
    linker = linker or EntityLinker(gateway.embed)
    ordered = sorted(pairs, key=lambda p: id_number(p.qa_id))
    jobs = [(a, qa, r) for a in adapters for qa in ordered for r in range(runs)]

    def run(job) -> tuple[Prediction, VerdictRecord]:
        adapter, qa, r = job
        ctx = AnswerContext(qa, snapshots[qa.issue_time], chunk_index, gateway, linker, params, r)
        pred = adapter.answer(ctx)
        verdict = "incorrect" if pred.failed else judge_answer(
            qa.question, qa.answer, pred.answer, gateway, tag=f"judge:{adapter.name}:{qa.qa_id}:{r}")
        return pred, VerdictRecord(qa.qa_id, adapter.name, r, qa.qtype.value, verdict)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    predictions = [p for p, _ in results]
    verdicts = [v for _, v in results]
    return EvaluationResult(predictions, verdicts, build_report(verdicts, ordered, names, runs))


# --------------------------------------------------------------------------
# Fact recovery
# --------------------------------------------------------------------------


class EmbeddingMatcher:
    """A fact is recovered when some verbalized triplet reaches ``threshold`` cosine."""

    def __init__(self, embed: Callable[[str], np.ndarray], threshold: float = RECOVERY_THRESHOLD) -> None:
        self.embed = embed
        self.threshold = threshold

    def matches(self, facts: Sequence[str], triplets: Sequence[str]) -> list[bool]:
        if not triplets:
            return [False] * len(facts)
        tv = np.vstack([self.embed(t) for t in triplets])
        fv = np.vstack([self.embed(f) for f in facts])
        return [bool(row.max() >= self.threshold) for row in fv @ tv.T]


class JudgeMatcher:
    """Asks the chat model whether any of the candidate triplets states the fact."""

    def __init__(self, gateway: Gateway, embed: Callable[[str], np.ndarray] | None = None, shortlist: int = 20) -> None:
        self.gateway = gateway
        self.embed = embed or gateway.embed
        self.shortlist = shortlist

    def matches(self, facts: Sequence[str], triplets: Sequence[str]) -> list[bool]:
        if not triplets:
            return [False] * len(facts)
        tv = np.vstack([self.embed(t) for t in triplets])
        out = []
        for i, fact in enumerate(facts):
            sims = tv @ self.embed(fact)
            top = np.argsort(-sims, kind="stable")[: self.shortlist]
            listing = "\n".join(f"- {triplets[j]}" for j in top)
            system, user = prompts.load("judge_fact").render(fact=fact, triplets=listing)
            try:
                resp = self.gateway.complete(ChatRequest.build(system, user, f"judge:fact:{i}"))
                out.append(bool(parse_json_reply(resp.text).get("match", False)))
            except (TransportError, ValueError, AttributeError):
                out.append(False)
        return out


def graph_triplets(graph: KnowledgeGraph | KGSnapshot) -> list[str]:
    ents = graph.entities
    edges = sorted(graph.edges.values(), key=lambda e: id_number(e.edge_id))
    return [fact_text(ents[e.subject_id].name, e.predicate, ents[e.object_id].name) for e in edges]


def fact_recovery_rate(graph: KnowledgeGraph | KGSnapshot, facts: Sequence[str], matcher) -> float:
    """Fraction of ``facts`` matched by at least one graph triplet."""
    if not facts:
        raise ContractViolation("fact list is empty")
    triplets = graph_triplets(graph)
    if not triplets:
        return 0.0
    hits = matcher.matches(list(facts), triplets)
    return sum(hits) / len(facts)
