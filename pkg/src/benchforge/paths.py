"""Reasoning-path sampling over graph snapshots and evidence gathering.

Walks ignore edge direction but record it per hop. Paths are simple (no
repeated node). The high-degree policy rejection-samples walks until one of
the intermediate nodes reaches the degree quantile of the snapshot.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from datetime import datetime
from typing import Sequence

from .corpus import Corpus
from .graph import GraphError, KGSnapshot, id_number
from .serde import format_time, parse_time

UNIFORM = "uniform"
HIGH_DEGREE = "high_degree"


class EvidenceError(GraphError):
    """A provenance span points at a missing document or outside its section."""


@dataclass(frozen=True)
class SamplingPolicy:
    k_range: tuple[int, int] = (1, 3)
    bias: str = UNIFORM
    degree_percentile: float = 0.90
    max_attempts: int = 1000
    rng_seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.k_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid k_range {self.k_range}")
        if self.bias not in (UNIFORM, HIGH_DEGREE):
            raise ValueError(f"unknown bias {self.bias!r}")
        if not 0.0 < self.degree_percentile < 1.0:
            raise ValueError("degree_percentile must lie in (0, 1)")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")

    def with_k(self, k: int, bias: str | None = None) -> "SamplingPolicy":
        return SamplingPolicy((k, k), bias or self.bias, self.degree_percentile, self.max_attempts, self.rng_seed)

    def to_json(self) -> dict:
        return {"k_range": list(self.k_range), "bias": self.bias, "degree_percentile": self.degree_percentile,
                "max_attempts": self.max_attempts, "rng_seed": self.rng_seed}


@dataclass(frozen=True)
class EvidenceRef:
    doc_id: str
    section_label: str
    start: int
    end: int
    submitted_at: datetime

    @property
    def key(self) -> tuple[str, str, int, int]:
        return (self.doc_id, self.section_label, self.start, self.end)

    def to_json(self) -> dict:
        return {"doc_id": self.doc_id, "section_label": self.section_label, "char_span": [self.start, self.end],
                "submitted_at": format_time(self.submitted_at)}

    @classmethod
    def from_json(cls, d: dict) -> "EvidenceRef":
        return cls(d["doc_id"], d["section_label"], int(d["char_span"][0]), int(d["char_span"][1]),
                   parse_time(d["submitted_at"]))


@dataclass(frozen=True)
class ReasoningPath:
    nodes: tuple[str, ...]
    relations: tuple[str, ...]
    hop_directions: tuple[str, ...]
    as_of: datetime
    evidence: tuple[EvidenceRef, ...]
    policy: SamplingPolicy
    path_id: str = ""

    def __post_init__(self) -> None:
        if len(self.nodes) != len(self.relations) + 1 or not self.relations:
            raise ValueError("a path needs k >= 1 relations and k + 1 nodes")
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("path repeats a node")

    @property
    def k(self) -> int:
        return len(self.relations)

    @property
    def terminal(self) -> str:
        return self.nodes[-1]

    @property
    def intermediates(self) -> tuple[str, ...]:
        return self.nodes[1:-1]

    @property
    def issue_time(self) -> datetime:
        return max(e.submitted_at for e in self.evidence)

    def with_id(self, path_id: str) -> "ReasoningPath":
        return ReasoningPath(self.nodes, self.relations, self.hop_directions, self.as_of, self.evidence,
                             self.policy, path_id)

    def to_json(self) -> dict:
        return {
            "path_id": self.path_id,
            "as_of": format_time(self.as_of),
            "nodes": list(self.nodes),
            "relations": list(self.relations),
            "hop_directions": list(self.hop_directions),
            "evidence_refs": [e.to_json() for e in self.evidence],
            "policy": self.policy.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ReasoningPath":
        pol = d["policy"]
        policy = SamplingPolicy(tuple(pol["k_range"]), pol["bias"], pol["degree_percentile"], pol["max_attempts"],
                                pol["rng_seed"])
        return cls(tuple(d["nodes"]), tuple(d["relations"]), tuple(d["hop_directions"]), parse_time(d["as_of"]),
                   tuple(EvidenceRef.from_json(e) for e in d["evidence_refs"]), policy, d.get("path_id", ""))


def degree_threshold(snapshot: KGSnapshot, percentile: float) -> int:
    """Nearest-rank empirical quantile of all entity degrees in the snapshot."""
    degrees = sorted(snapshot.degrees().values())
    if not degrees:
        return 0
    rank = max(1, math.ceil(percentile * len(degrees)))
    return degrees[rank - 1]


def path_evidence(snapshot: KGSnapshot, nodes: Sequence[str], relations: Sequence[str]) -> tuple[EvidenceRef, ...]:
    """Provenance of v0, evidence of r1, provenance of v1, ... deduplicated by span."""
    seen: dict[tuple, EvidenceRef] = {}
    order: list[object] = [nodes[0]]
    for rel, node in zip(relations, nodes[1:]):
        order += [rel, node]
    for i, item in enumerate(order):
        if i % 2 == 0:
            records = snapshot.entities[item].provenance
        else:
            records = snapshot.edges[item].evidence
        for r in records:
            ref = EvidenceRef(r.doc_id, r.section_label, r.start, r.end, r.submitted_at)
            seen.setdefault(ref.key, ref)
    return tuple(seen.values())


def sample_path(snapshot: KGSnapshot, policy: SamplingPolicy, rng: random.Random) -> ReasoningPath | None:
    """Draw one simple path, or ``None`` when ``max_attempts`` walks all fail."""
    if len(snapshot) == 0:
        raise ValueError("cannot sample from an empty snapshot")
    starts = [eid for eid in snapshot.entity_ids() if snapshot.degree(eid) > 0]
    if not starts:
        return None
    threshold = degree_threshold(snapshot, policy.degree_percentile) if policy.bias == HIGH_DEGREE else 0
    lo, hi = policy.k_range
    for _ in range(policy.max_attempts):
        k = rng.randint(lo, hi)
        current = rng.choice(starts)
        nodes = [current]
        visited = {current}
        relations: list[str] = []
        directions: list[str] = []
        for _step in range(k):
            options = [r for r in snapshot.incident_edges(current)
                       if snapshot.edges[r].other(current) not in visited]
            if not options:
                break
            rid = rng.choice(options)
            edge = snapshot.edges[rid]
            directions.append("forward" if edge.subject_id == current else "inverse")
            current = edge.other(current)
            relations.append(rid)
            nodes.append(current)
            visited.add(current)
        if len(relations) < k:
            continue
        if policy.bias == HIGH_DEGREE and not any(snapshot.degree(v) >= threshold for v in nodes[1:-1]):
            continue
        return ReasoningPath(tuple(nodes), tuple(relations), tuple(directions), snapshot.as_of,
                             path_evidence(snapshot, nodes, relations), policy)
    return None


@dataclass(frozen=True)
class EvidenceItem:
    ref: EvidenceRef
    text: str


@dataclass
class EvidenceBundle:
    items: list[EvidenceItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def doc_ids(self) -> list[str]:
        return sorted({i.ref.doc_id for i in self.items})

    def render(self) -> str:
        return "\n".join(f"[{i.ref.doc_id} {i.ref.section_label} {i.ref.start}-{i.ref.end}] {i.text}"
                         for i in self.items)


def gather_evidence(path: ReasoningPath, corpus: Corpus) -> EvidenceBundle:
    """Dereference every evidence span of ``path`` to its text, in path order."""
    bundle = EvidenceBundle()
    seen: set[tuple] = set()
    for ref in path.evidence:
        if ref.key in seen:
            continue
        seen.add(ref.key)
        if ref.doc_id not in corpus:
            raise EvidenceError(f"span {ref.key} points at missing document {ref.doc_id}")
        try:
            section = corpus.get(ref.doc_id).section(ref.section_label).text
        except KeyError as exc:
            raise EvidenceError(f"span {ref.key}: {exc}") from exc
        if not 0 <= ref.start < ref.end <= len(section):
            raise EvidenceError(f"span {ref.key} lies outside section of length {len(section)}")
        bundle.items.append(EvidenceItem(ref, section[ref.start:ref.end]))
    return bundle


def simple_paths(snapshot: KGSnapshot, k: int) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    """All simple undirected walks with exactly ``k`` edges (for small graphs and tests)."""
    out = []

    def extend(nodes: list[str], rels: list[str]) -> None:
        if len(rels) == k:
            out.append((tuple(nodes), tuple(rels)))
            return
        cur = nodes[-1]
        for rid in snapshot.incident_edges(cur):
            nxt = snapshot.edges[rid].other(cur)
            if nxt not in nodes:
                extend(nodes + [nxt], rels + [rid])

    for eid in sorted(snapshot.entities, key=id_number):
        extend([eid], [])
    return out
