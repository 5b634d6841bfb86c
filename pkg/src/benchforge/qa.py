"""Question-answer generation from sampled paths and their evidence.

A plan assigns sampled paths to question types; each plan entry becomes one
tagged chat call whose JSON reply is checked before it is accepted:

* entity-answer types must answer with the terminal entity (name or alias),
  and the stored answer is its canonical name;
* multi-hop questions must not name any intermediate entity or alias;
* counterfactual answers may only name entities that occur on the path, in
  the evidence text, or in the perturbation.
"""

from __future__ import annotations

import enum
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Mapping, Sequence

from . import prompts
from .corpus import Corpus
from .gateway import ChatRequest, ContractViolation, Gateway, Message, TransportError, parse_json_reply
from .graph import KGSnapshot, id_number
from .paths import (
    HIGH_DEGREE,
    EvidenceBundle,
    EvidenceRef,
    ReasoningPath,
    SamplingPolicy,
    gather_evidence,
    sample_path,
)
from .serde import format_time, parse_time

logger = logging.getLogger(__name__)

_YEAR = re.compile(r"\b(19|20)\d{2}\b")


class QuestionType(str, enum.Enum):
    SingleHop = "SingleHop"
    SingleHopConditional = "SingleHopConditional"
    MultiHop = "MultiHop"
    MultiHopDifficult = "MultiHopDifficult"
    Counterfactual = "Counterfactual"
    OpenEnded = "OpenEnded"

    @property
    def entity_answer(self) -> bool:
        return self in (QuestionType.SingleHop, QuestionType.SingleHopConditional,
                        QuestionType.MultiHop, QuestionType.MultiHopDifficult)

    @property
    def multi_hop(self) -> bool:
        return self in (QuestionType.MultiHop, QuestionType.MultiHopDifficult)

    def accepts_k(self, k: int) -> bool:
        if self in (QuestionType.SingleHop, QuestionType.SingleHopConditional):
            return k == 1
        if self.multi_hop:
            return k >= 2
        return k >= 1


INSTRUCTIONS = {
    QuestionType.SingleHop: "Ask for the answer entity through the single relation.",
    QuestionType.SingleHopConditional: "Ask a single-relation question restricted by the given condition.",
    QuestionType.MultiHop: "Chain every relation. Refer to intermediate entities only indirectly, never by name.",
    QuestionType.MultiHopDifficult: ("Chain every relation. Refer to intermediate entities only indirectly, never "
                                     "by name. The path crosses a highly connected entity, so keep the description "
                                     "specific enough to identify a single answer."),
    QuestionType.Counterfactual: ("Ask what would follow if the perturbation held. Answer cautiously from the "
                                  "evidence and do not introduce entities that are not mentioned."),
    QuestionType.OpenEnded: "Ask an open question whose answer is a short explanation grounded in the evidence.",
}


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Perturbation:
    kind: str  # "predicate" or "entity"
    position: int  # index into the element sequence v0, r1, v1, ...
    original: str
    perturbed: str
    original_elements: tuple[str, ...]
    perturbed_elements: tuple[str, ...]

    def describe(self, snapshot: KGSnapshot) -> str:
        if self.kind == "predicate":
            return f"relation '{self.original}' replaced by '{self.perturbed}'"
        ents = snapshot.entities
        return f"entity '{ents[self.original].name}' replaced by '{ents[self.perturbed].name}'"

    def to_json(self) -> dict:
        return {"kind": self.kind, "position": self.position, "original": self.original,
                "perturbed": self.perturbed, "original_elements": list(self.original_elements),
                "perturbed_elements": list(self.perturbed_elements)}

    @classmethod
    def from_json(cls, d: dict) -> "Perturbation":
        return cls(d["kind"], int(d["position"]), d["original"], d["perturbed"], tuple(d["original_elements"]),
                   tuple(d["perturbed_elements"]))


@dataclass(frozen=True)
class QAPair:
    qa_id: str
    domain_id: str
    qtype: QuestionType
    question: str
    answer: str
    issue_time: datetime
    path_id: str
    evidence_refs: tuple[EvidenceRef, ...]
    trace: Mapping[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "domain_id": self.domain_id,
            "qtype": self.qtype.value,
            "question": self.question,
            "answer": self.answer,
            "issue_time": format_time(self.issue_time),
            "path_id": self.path_id,
            "evidence_refs": [e.to_json() for e in self.evidence_refs],
            "trace": dict(self.trace),
        }

    @classmethod
    def from_json(cls, d: dict) -> "QAPair":
        return cls(d["qa_id"], d["domain_id"], QuestionType(d["qtype"]), d["question"], d["answer"],
                   parse_time(d["issue_time"]), d["path_id"],
                   tuple(EvidenceRef.from_json(e) for e in d["evidence_refs"]), d.get("trace", {}))

    def replace(self, **changes) -> "QAPair":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return QAPair(**data)


@dataclass(frozen=True)
class Abstention:
    qa_id: str
    path_id: str
    qtype: QuestionType
    reason: str

    def to_json(self) -> dict:
        return {"qa_id": self.qa_id, "path_id": self.path_id, "qtype": self.qtype.value, "reason": self.reason}


@dataclass(frozen=True)
class PlanEntry:
    path: ReasoningPath
    qtype: QuestionType
    perturbation: Perturbation | None = None

    def to_json(self) -> dict:
        out = {"qtype": self.qtype.value, "path": self.path.to_json()}
        if self.perturbation is not None:
            out["perturbation"] = self.perturbation.to_json()
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PlanEntry":
        pert = d.get("perturbation")
        return cls(ReasoningPath.from_json(d["path"]), QuestionType(d["qtype"]),
                   Perturbation.from_json(pert) if pert else None)


@dataclass
class Plan:
    entries: list[PlanEntry] = field(default_factory=list)
    shortfall: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.qtype.value] = out.get(e.qtype.value, 0) + 1
        return out


# --------------------------------------------------------------------------
# Perturbation and planning
# --------------------------------------------------------------------------


def path_elements(path: ReasoningPath, snapshot: KGSnapshot) -> tuple[str, ...]:
    """``(v0, pred1, v1, ..., pred_k, v_k)`` with entity ids and predicate labels."""
    out = [path.nodes[0]]
    for rid, node in zip(path.relations, path.nodes[1:]):
        out += [snapshot.edges[rid].predicate, node]
    return tuple(out)


def perturb_for_counterfactual(path: ReasoningPath, snapshot: KGSnapshot, predicates: Sequence[str],
                               rng: random.Random) -> Perturbation | None:
    """Change exactly one predicate or one non-terminal entity; ``None`` if impossible."""
    elements = path_elements(path, snapshot)
    options: list[tuple[str, int, str]] = []
    for i in range(1, len(elements), 2):
        options += [("predicate", i, p) for p in sorted(set(predicates)) if p != elements[i]]
    on_path = set(path.nodes)
    by_type: dict[str, list[str]] = {}
    for eid in snapshot.entity_ids():
        by_type.setdefault(snapshot.entities[eid].type_label, []).append(eid)
    for i in range(0, len(elements) - 1, 2):
        etype = snapshot.entities[elements[i]].type_label
        options += [("entity", i, e) for e in by_type[etype] if e not in on_path]
    if not options:
        return None
    kind, pos, new = rng.choice(options)
    perturbed = list(elements)
    perturbed[pos] = new
    return Perturbation(kind, pos, elements[pos], new, elements, tuple(perturbed))


def _k_policy(qtype: QuestionType, base: SamplingPolicy) -> SamplingPolicy:
    lo, hi = base.k_range
    if qtype in (QuestionType.SingleHop, QuestionType.SingleHopConditional):
        return SamplingPolicy((1, 1), "uniform", base.degree_percentile, base.max_attempts, base.rng_seed)
    if qtype.multi_hop:
        bias = HIGH_DEGREE if qtype is QuestionType.MultiHopDifficult else "uniform"
        return SamplingPolicy((max(2, lo), max(2, hi)), bias, base.degree_percentile, base.max_attempts,
                              base.rng_seed)
    return SamplingPolicy((lo, hi), "uniform", base.degree_percentile, base.max_attempts, base.rng_seed)


def plan_generation(snapshot: KGSnapshot, targets: Mapping[QuestionType | str, int], policy: SamplingPolicy,
                    rng: random.Random, predicates: Sequence[str] = ()) -> Plan:
    """Sample one path per requested question, honoring each type's hop count.

    Repeated ``(path, type)`` draws are resampled; when the sampler cannot
    produce a fresh path the remainder is reported as shortfall.
    """
    plan = Plan()
    wanted = {QuestionType(k): int(v) for k, v in targets.items()}
    if any(v < 0 for v in wanted.values()):
        raise ContractViolation("generation targets must be nonnegative")
    if len(snapshot) == 0:
        plan.shortfall = {q.value: n for q, n in wanted.items() if n}
        return plan
    for qtype in QuestionType:
        count = wanted.get(qtype, 0)
        if count == 0:
            continue
        pol = _k_policy(qtype, policy)
        seen: set[tuple] = set()
        made = 0
        misses = 0
        while made < count and misses < pol.max_attempts:
            path = sample_path(snapshot, pol, rng)
            if path is None:
                break
            key = (path.nodes, path.relations)
            if key in seen:
                misses += 1
                continue
            perturbation = None
            if qtype is QuestionType.Counterfactual:
                perturbation = perturb_for_counterfactual(path, snapshot, predicates, rng)
                if perturbation is None:
                    misses += 1
                    continue
            seen.add(key)
            pid = f"P{len(plan.entries) + 1:06d}"
            plan.entries.append(PlanEntry(path.with_id(pid), qtype, perturbation))
            made += 1
        if made < count:
            plan.shortfall[qtype.value] = count - made
            logger.warning("plan shortfall for %s: %d of %d", qtype.value, count - made, count)
    return plan


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------


def derive_condition(path: ReasoningPath, snapshot: KGSnapshot, bundle: EvidenceBundle, corpus: Corpus) -> str:
    """A dated phrase from the edge evidence, else the category of its document."""
    edge_keys = {ev.span_key for rid in path.relations for ev in snapshot.edges[rid].evidence}
    for item in bundle.items:
        if item.ref.key in edge_keys:
            m = _YEAR.search(item.text)
            if m:
                return f"as reported for {m.group(0)}"
    doc = corpus.get(bundle.items[0].ref.doc_id)
    return f"within {doc.categories[0]} research"


def _contains_name(text: str, name: str) -> bool:
    return re.search(rf"(?<!\w){re.escape(name.casefold())}(?!\w)", text.casefold()) is not None


def _names(snapshot: KGSnapshot, eid: str) -> list[str]:
    ent = snapshot.entities[eid]
    return [ent.name, *ent.aliases]


def render_path(path: ReasoningPath, snapshot: KGSnapshot, qtype: QuestionType) -> str:
    ents = snapshot.entities
    lines = [f"Start entity: {ents[path.nodes[0]].name}", f"Answer entity: {ents[path.terminal].name}"]
    if path.intermediates:
        names = ", ".join(ents[v].name for v in path.intermediates)
        if qtype.multi_hop:
            lines.append(f"Intermediate entities (never name them in the question): {names}")
        else:
            lines.append(f"Intermediate entities: {names}")
    lines.append("Hops:")
    for i, rid in enumerate(path.relations, start=1):
        e = snapshot.edges[rid]
        lines.append(f"{i}. {ents[e.subject_id].name} --{e.predicate}--> {ents[e.object_id].name}")
    return "\n".join(lines)


def _render_exemplars(qtype: QuestionType, count: int) -> str:
    shots = prompts.exemplars().get(qtype.value, [])[:count]
    if not shots:
        raise ContractViolation(f"no exemplars for {qtype.value}")
    return "\n".join(f"- path: {s['path']}\n  question: {s['question']}\n  answer: {s['answer']}" for s in shots)


def generate_qa(qa_id: str, entry: PlanEntry, snapshot: KGSnapshot, corpus: Corpus, gateway: Gateway,
                domain_id: str, exemplar_count: int = 2) -> QAPair | Abstention:
    path, qtype = entry.path, entry.qtype
    if not qtype.accepts_k(path.k):
        raise ContractViolation(f"{qtype.value} cannot use a path with k={path.k}")
    bundle = gather_evidence(path, corpus)
    if not bundle.items:
        raise ContractViolation(f"path {path.path_id} has no evidence")

    condition = derive_condition(path, snapshot, bundle, corpus) if qtype is QuestionType.SingleHopConditional else None
    extra = []
    if condition:
        extra.append(f"Condition: {condition}")
    if entry.perturbation is not None:
        extra.append(f"Perturbation: {entry.perturbation.describe(snapshot)}")
    template = prompts.load("qa")
    system, user = template.render(
        qtype=qtype.value,
        instructions=INSTRUCTIONS[qtype],
        exemplars=_render_exemplars(qtype, exemplar_count),
        path=render_path(path, snapshot, qtype),
        condition="\n".join(extra),
        evidence=bundle.render(),
    )
    tag = f"qa:{qtype.value}:{path.path_id}"
    request = ChatRequest.build(system, user, tag)

    reply = None
    for attempt in range(2):
        try:
            response = gateway.complete(request)
        except TransportError as exc:
            return Abstention(qa_id, path.path_id, qtype, f"gateway failure: {exc}")
        try:
            reply = parse_json_reply(response.text)
            if not isinstance(reply, dict):
                raise ValueError("reply is not a JSON object")
            break
        except ValueError as exc:
            reply = None
            if attempt == 0:
                _, fix = prompts.load("repair").render(error=str(exc)[:200])
                request = ChatRequest(request.messages + (Message("assistant", response.text or "(empty)"),
                                                          Message("user", fix)), tag=tag)
    if reply is None:
        return Abstention(qa_id, path.path_id, qtype, "unparseable reply")
    if reply.get("abstain"):
        return Abstention(qa_id, path.path_id, qtype, "generator abstained")
    question = str(reply.get("question", "")).strip()
    answer = str(reply.get("answer", "")).strip()
    if not question or not answer:
        return Abstention(qa_id, path.path_id, qtype, "empty question or answer")

    ents = snapshot.entities
    if qtype.entity_answer:
        if not any(answer.casefold() == n.casefold() for n in _names(snapshot, path.terminal)):
            return Abstention(qa_id, path.path_id, qtype, "answer is not the terminal entity")
        answer = ents[path.terminal].name
    if qtype.multi_hop:
        for v in path.intermediates:
            for n in _names(snapshot, v):
                if _contains_name(question, n):
                    return Abstention(qa_id, path.path_id, qtype, f"question names intermediate entity {n!r}")
    if qtype is QuestionType.Counterfactual:
        allowed = set(path.nodes)
        if entry.perturbation is not None and entry.perturbation.kind == "entity":
            allowed.add(entry.perturbation.perturbed)
        evidence_text = "\n".join(i.text for i in bundle.items)
        for eid in snapshot.entity_ids():
            if eid in allowed:
                continue
            for n in _names(snapshot, eid):
                if _contains_name(answer, n) and not _contains_name(evidence_text, n):
                    return Abstention(qa_id, path.path_id, qtype, f"answer introduces entity {n!r}")

    trace: dict[str, object] = {"tag": tag, "model": gateway.model_id, "prompt": template.ref}
    if condition:
        trace["condition"] = condition
    if entry.perturbation is not None:
        trace["perturbation"] = entry.perturbation.to_json()
    return QAPair(qa_id, domain_id, qtype, question, answer, path.issue_time, path.path_id, path.evidence, trace)


def generate_all(plan: Plan, snapshot: KGSnapshot, corpus: Corpus, gateway: Gateway, domain_id: str,
                 exemplar_count: int = 2, workers: int = 1) -> tuple[list[QAPair], list[Abstention]]:
    """Generate every plan entry; results are ordered by qa_id whatever the worker count."""
    jobs = [(f"Q{i + 1:06d}", e) for i, e in enumerate(plan.entries)]

    def run(job):
        qa_id, entry = job
        return generate_qa(qa_id, entry, snapshot, corpus, gateway, domain_id, exemplar_count)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    results.sort(key=lambda r: id_number(r.qa_id))
    pairs = [r for r in results if isinstance(r, QAPair)]
    abstained = [r for r in results if isinstance(r, Abstention)]
    return pairs, abstained
