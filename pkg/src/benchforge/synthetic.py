"""Deterministic synthetic domain used for closed-loop tests and the bundled demo.

A small planted world of methods, datasets, tasks and metrics is verbalized
into 20 dated documents. Every planted relation is one sentence (``"In 2024,
X evaluated on Y."``) surrounded by neutral filler text, so the scripted
extractor reply for each document can point at exact character spans.

Longer documents state proportionally more facts; together with the short
prompt this keeps extraction tokens close to proportional to document length.

``python -m benchforge.synthetic OUT_DIR`` regenerates the bundled files.
"""

from __future__ import annotations

import json
import random
import re
import sys
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import Document, Section
from .gateway import ChatRequest, canonical_text, trigram_embed
from .serde import dumps, write_json, write_jsonl

DOMAIN_ID = "synthetic-ai"
SEED = 20250101
N_DOCS = 20
MIN_CHARS = 16_000
MAX_CHARS = 100_000
CHARS_PER_FACT = 8_000
N_PLANTED_FACTS = 15
N_DROPPED_FACTS = 5
ISOLATION = 0.7
WINDOW = ("2025-01-01T00:00:00Z", "2025-12-31T23:59:59Z")
CATEGORIES = ("cs.AI", "cs.LG", "cs.CL")
SECTIONS = ("abstract", "introduction", "method", "experiments")

PREDICATES: dict[str, tuple[str, ...]] = {
    "uses": ("makes use of", "employs"),
    "evaluates_on": ("evaluated on", "tested on"),
    "addresses": ("tackles", "targets"),
    "measured_by": ("measured by", "scored with"),
    "extends": ("builds on", "generalizes"),
    "outperforms": ("beats", "surpasses"),
    "benchmarks": ("serves as a benchmark for", "is a benchmark for"),
}
ENTITY_TYPES = ("method", "dataset", "task", "metric")

_SYLLABLES = ("var", "nel", "quin", "tar", "hal", "vesk", "mor", "dun", "pel", "rix", "sol", "bren", "cal", "dor",
              "fen", "gir", "jal", "kov", "lum", "nax", "oph", "ryl", "sev", "tum", "ulb", "wex", "yor", "zan")
_METHOD_SUFFIX = ("Net", "Former", "Diffusion", "Router", "Planner", "Encoder", "Sampler")
_DATASET_SUFFIX = ("Bench", "Corpus", "Suite", "Set")
_DATASET_TOPICS = ("glacier radar soundings", "courtroom hearing transcripts", "orchard drone imagery",
                   "seismograph waveform traces", "museum catalogue entries", "ferry timetable logs",
                   "beehive acoustic recordings", "opera libretto scans")
_TASKS = ("lunar crater segmentation", "protein loop docking", "legal clause retrieval", "orchard yield forecasting",
          "sign language glossing", "wildfire spread prediction")
_METRICS = ("Kestrel score", "Halden F-measure", "Brisk recall index", "Tamsin calibration error")
_TASK_DESCRIPTIONS = ("outlining impact basins in orbital photographs", "fitting flexible peptide segments into pockets",
                      "finding contract passages that match a query", "estimating harvest volume before picking",
                      "transcribing gestures into written tokens", "projecting burn perimeters hours ahead")
_METRIC_DESCRIPTIONS = ("weighted overlap between predicted and true regions", "harmonic mean tuned for rare labels",
                        "share of relevant items found within a budget", "gap between stated and observed confidence")
_PURPOSE = ("sparse sensor fusion", "long-horizon planning", "low-resource translation", "robust tabular learning",
            "streaming anomaly detection", "few-shot molecule design", "multi-agent negotiation",
            "compressed video understanding", "federated recommendation", "code repair",
            "satellite image denoising", "speech disfluency tagging", "graph link forecasting",
            "causal effect estimation")
_FILLER = (
    "The experimental protocol follows common practice for data splits and model selection.",
    "Hyperparameters were tuned on a held-out portion of the training data.",
    "All runs were repeated with several random initializations to estimate variance.",
    "Implementation details such as batch size and learning rate schedules are listed in the appendix.",
    "Compute was limited to a single accelerator per experiment.",
    "Qualitative inspection of failure cases suggests room for further analysis.",
    "Ablations isolate the contribution of each architectural component.",
    "Preprocessing removes duplicated records and normalizes feature scales.",
    "Training curves remain stable across the considered configurations.",
    "Limitations include the modest scale of the evaluation and the absence of human studies.",
    "Related approaches differ mainly in how they trade accuracy for efficiency.",
    "Error bars indicate one standard deviation across repeated runs.",
)


@dataclass(frozen=True)
class PlantedEntity:
    type_label: str
    name: str
    description: str


@dataclass(frozen=True)
class PlantedFact:
    subject: str
    predicate: str
    object: str

    def text(self) -> str:
        return f"{self.subject} {self.predicate.replace('_', ' ')} {self.object}"


@dataclass
class World:
    entities: dict[str, PlantedEntity]
    facts: list[PlantedFact]


def _word(rng: random.Random, used: set[str]) -> str:
    while True:
        w = "".join(rng.sample(_SYLLABLES, 3)).capitalize()
        if w not in used:
            used.add(w)
            return w


def build_world(seed: int = SEED) -> World:
    rng = random.Random(seed)
    used: set[str] = set()
    ents: dict[str, PlantedEntity] = {}
    methods = []
    for i in range(14):
        name = f"{_word(rng, used)} {_METHOD_SUFFIX[i % len(_METHOD_SUFFIX)]}"
        ents[name] = PlantedEntity("method", name, f"model family for {_PURPOSE[i]}")
        methods.append(name)
    datasets = []
    for i in range(8):
        name = f"{_word(rng, used)}{_DATASET_SUFFIX[i % len(_DATASET_SUFFIX)]}"
        ents[name] = PlantedEntity("dataset", name, f"{_DATASET_TOPICS[i]} gathered for benchmarking")
        datasets.append(name)
    for t, desc in zip(_TASKS, _TASK_DESCRIPTIONS):
        ents[t] = PlantedEntity("task", t, desc)
    for m, desc in zip(_METRICS, _METRIC_DESCRIPTIONS):
        ents[m] = PlantedEntity("metric", m, desc)

    facts: list[PlantedFact] = []
    for i, m in enumerate(methods):
        facts.append(PlantedFact(m, "addresses", _TASKS[i % len(_TASKS)]))
        for d in rng.sample(datasets, 2):
            facts.append(PlantedFact(m, "evaluates_on", d))
        facts.append(PlantedFact(m, "uses", _METRICS[i % len(_METRICS)]))
        if i >= 2:
            facts.append(PlantedFact(m, rng.choice(("extends", "outperforms")), methods[rng.randrange(i)]))
    for i, d in enumerate(datasets):
        facts.append(PlantedFact(d, "benchmarks", _TASKS[i % len(_TASKS)]))
    for i, t in enumerate(_TASKS):
        facts.append(PlantedFact(t, "measured_by", _METRICS[i % len(_METRICS)]))
    return World(ents, facts)


# --------------------------------------------------------------------------
# Documents and scripted extraction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FactMention:
    fact: PlantedFact
    section: str
    start: int
    end: int
    subject_start: int
    object_start: int


def _doc_lengths(rng: random.Random) -> list[int]:
    ratio = MAX_CHARS / MIN_CHARS
    lengths = [round(MIN_CHARS * ratio ** (i / (N_DOCS - 1))) for i in range(N_DOCS)]
    rng.shuffle(lengths)
    return lengths


def _assign_facts(world: World, rng: random.Random, counts: Sequence[int]) -> list[list[PlantedFact]]:
    pool = list(world.facts)
    rng.shuffle(pool)
    out: list[list[PlantedFact]] = [[] for _ in counts]
    cursor = 0
    # deal every fact once, then fill remaining capacity with repeats
    for i, n in enumerate(counts):
        while len(out[i]) < n:
            if cursor < len(pool):
                fact = pool[cursor]
                cursor += 1
            else:
                fact = rng.choice(world.facts)
            if fact not in out[i]:
                out[i].append(fact)
    if cursor < len(pool):
        raise RuntimeError("document capacity too small for the planted facts")
    return out


def build_documents(world: World, seed: int = SEED) -> tuple[list[Document], dict[str, list[FactMention]]]:
    rng = random.Random(seed + 1)
    lengths = _doc_lengths(rng)
    counts = [max(2, round(n / CHARS_PER_FACT)) for n in lengths]
    facts_per_doc = _assign_facts(world, rng, counts)
    start = datetime(2025, 1, 6, 9, 0, tzinfo=timezone.utc)
    docs, mentions = [], {}
    for i in range(N_DOCS):
        doc_id = f"syn-{i + 1:03d}"
        facts = facts_per_doc[i]
        texts = {s: "" for s in SECTIONS}
        doc_mentions: list[FactMention] = []
        target = lengths[i]
        per_section = target // len(SECTIONS)
        placed = {s: [] for s in SECTIONS}
        for j, fact in enumerate(facts):
            placed[SECTIONS[j % len(SECTIONS)]].append(fact)
        for s in SECTIONS:
            text = ""
            slots = placed[s]
            gap = max(1, per_section // (len(slots) + 1))
            for fact in slots:
                while len(text) < gap * (len(doc_mentions_for(s, doc_mentions)) + 1):
                    text += rng.choice(_FILLER) + " "
                year = rng.choice((2023, 2024, 2025))
                phrase = rng.choice((fact.predicate.replace("_", " "), *PREDICATES[fact.predicate]))
                prefix = f"In {year}, "
                sentence = f"{prefix}{fact.subject} {phrase} {fact.object}."
                s0 = len(text)
                text += sentence + " "
                subj_start = s0 + len(prefix)
                obj_start = s0 + len(sentence) - 1 - len(fact.object)
                doc_mentions.append(FactMention(
                    PlantedFact(fact.subject, phrase, fact.object), s, s0, s0 + len(sentence), subj_start, obj_start))
            while len(text) < per_section:
                text += rng.choice(_FILLER) + " "
            texts[s] = text.strip()
        submitted = start + timedelta(days=17 * i, hours=i % 5)
        title_method = facts[0].subject
        doc = Document(
            id=doc_id,
            title=f"Notes on {title_method}",
            authors=(f"Author {chr(65 + i)}", f"Author {chr(66 + i)}"),
            categories=(CATEGORIES[i % len(CATEGORIES)],),
            submitted_at=submitted,
            sections=tuple(Section(s, texts[s]) for s in SECTIONS),
        )
        docs.append(doc)
        mentions[doc_id] = doc_mentions
    return docs, mentions


def doc_mentions_for(section: str, mentions: Sequence[FactMention]) -> list[FactMention]:
    return [m for m in mentions if m.section == section]


def canonical_fact(m: FactMention) -> PlantedFact:
    for pred, aliases in PREDICATES.items():
        if m.fact.predicate in (pred.replace("_", " "), *aliases):
            return PlantedFact(m.fact.subject, pred, m.fact.object)
    raise KeyError(m.fact.predicate)


def extraction_reply(world: World, mentions: Sequence[FactMention],
                     drop: Iterable[PlantedFact] = ()) -> dict:
    """The reply a perfect extractor would give for one document."""
    dropped = set(drop)
    entities: dict[str, dict] = {}
    relations = []
    for m in mentions:
        for name, pos in ((m.fact.subject, m.subject_start), (m.fact.object, m.object_start)):
            if name not in entities:
                ent = world.entities[name]
                entities[name] = {"type": ent.type_label, "name": name, "description": ent.description,
                                  "section": m.section, "span": [pos, pos + len(name)]}
        if canonical_fact(m) in dropped:
            continue
        relations.append({"subject": m.fact.subject, "predicate": m.fact.predicate, "object": m.fact.object,
                          "section": m.section, "span": [m.start, m.end]})
    return {"entities": list(entities.values()), "relations": relations}


def _max_sibling_similarity(facts: Sequence[PlantedFact]) -> list[float]:
    vecs = [trigram_embed(f.text()) for f in facts]
    return [max(float(v @ u) for j, u in enumerate(vecs) if j != i) for i, v in enumerate(vecs)]


def planted_facts(world: World, seed: int = SEED) -> list[PlantedFact]:
    """The recovery fact list; its first ``N_DROPPED_FACTS`` entries are the ones the lossy extractor drops.

    Dropped facts are drawn from facts whose nearest sibling stays below
    ``ISOLATION`` cosine, so no surviving triplet can stand in for them.
    """
    rng = random.Random(seed + 2)
    sims = dict(zip(world.facts, _max_sibling_similarity(world.facts)))
    order = list(world.facts)
    rng.shuffle(order)
    dropped = [f for f in order if sims[f] < ISOLATION][:N_DROPPED_FACTS]
    kept = [f for f in order if f not in dropped][:N_PLANTED_FACTS - N_DROPPED_FACTS]
    return dropped + kept


def dropped_facts(world: World) -> list[PlantedFact]:
    return planted_facts(world)[:N_DROPPED_FACTS]


def extraction_script(world: World, mentions: Mapping[str, Sequence[FactMention]],
                      drop: Iterable[PlantedFact] = ()) -> dict[str, dict]:
    drop = list(drop)
    return {f"extract:{doc_id}": extraction_reply(world, ms, drop) for doc_id, ms in sorted(mentions.items())}


def schema_json() -> dict:
    return {"domain_id": DOMAIN_ID, "entity_types": list(ENTITY_TYPES),
            "predicates": {p: list(a) for p, a in PREDICATES.items()}}


# --------------------------------------------------------------------------
# Simulated responders for the non-extraction stages
# --------------------------------------------------------------------------

_HOP = re.compile(r"^\d+\. (.+?) --(\w+)--> (.+)$")


def _field(text: str, label: str) -> str | None:
    for line in text.splitlines():
        if line.startswith(label):
            return line[len(label):].strip()
    return None


def _phrase(pred: str) -> str:
    return pred.replace("_", " ")


def qa_responder(request: ChatRequest) -> str:
    """Writes a templated question from the rendered path block."""
    qtype = request.tag.split(":")[1]
    text = request.last_user_text
    start = _field(text, "Start entity:") or ""
    answer = _field(text, "Answer entity:") or ""
    hops = [m.groups() for m in (_HOP.match(line) for line in text.splitlines()) if m]
    condition = _field(text, "Condition:")
    perturbation = _field(text, "Perturbation:")
    if not hops:
        return json.dumps({"question": "", "answer": "", "abstain": True})

    # describe the answer by walking from the start entity without naming intermediates
    desc = start
    current = start
    for subj, pred, obj in hops:
        if subj == current:
            desc, current = (f"the item that {desc} {_phrase(pred)}" if len(hops) > 1 else desc), obj
        else:
            desc, current = f"the item that {_phrase(pred)} {desc}", subj
    subj, pred, obj = hops[0]
    if qtype in ("SingleHop", "SingleHopConditional"):
        lead = "according to the literature"
        if qtype == "SingleHopConditional" and condition:
            lead = condition
        if obj == answer:
            q = f"{lead}, {subj} {_phrase(pred)} which item?"
        else:
            q = f"{lead}, which item {_phrase(pred)} {obj}?"
        out = {"question": q[0].upper() + q[1:], "answer": answer}
    elif qtype in ("MultiHop", "MultiHopDifficult"):
        lead = "Following the chain of reported relations" if qtype == "MultiHopDifficult" else "Starting from " + start
        out = {"question": f"{lead}, what is {desc}?", "answer": answer}
    elif qtype == "Counterfactual":
        chain = "; ".join(f"{s} {_phrase(p)} {o}" for s, p, o in hops)
        out = {"question": f"Suppose the {perturbation}. What would that imply for the link between {start} and "
                           f"{answer}?",
               "answer": f"The evidence only reports that {chain}, so the altered link between {start} and {answer} "
                         f"would not be supported."}
    else:
        chain = ", then ".join(f"{s} {_phrase(p)} {o}" for s, p, o in hops)
        out = {"question": f"How is {start} connected to {answer} in the reported findings?",
               "answer": f"The findings state that {chain}."}
    out["abstain"] = False
    return json.dumps(out, sort_keys=True)


def qc_responder(request: ChatRequest) -> str:
    text = request.last_user_text
    answer = (_field(text, "Answer:") or "").casefold()
    context = text.split("Context:", 1)[-1].casefold()
    grounded = answer.rstrip(".") in context or len(answer.split()) > 6
    return json.dumps({"answerable": grounded, "faithful": grounded}, sort_keys=True)


def _surface_groups() -> list[tuple[str, ...]]:
    return [(_phrase(canon), *aliases) for canon, aliases in PREDICATES.items()]


def answer_responder(request: ChatRequest) -> str:
    """A weak reader: resolves single-hop questions from injected facts or passages."""
    text = request.last_user_text
    question = (_field(text, "Question:") or "").casefold()
    lines = [line.casefold() for line in text.splitlines() if not line.startswith("Question:")]
    for group in _surface_groups():
        for pred in group:
            forward = re.search(rf"^(?:[^,]*, )?(.+) {re.escape(pred)} which item\?", question)
            inverse = re.search(rf"which item {re.escape(pred)} (.+)\?", question)
            if not (forward or inverse):
                continue
            for ph in group:
                if forward:
                    pattern = rf"{re.escape(forward.group(1))} {re.escape(ph)} (.+?)(?: \(confidence|\.|$)"
                else:
                    pattern = rf"(?:^- |in \d{{4}}, )([^.]+?) {re.escape(ph)} {re.escape(inverse.group(1))}(?:[ .]|$)"
                for low in lines:
                    hit = re.search(pattern, low)
                    if hit:
                        return f"Answer: {hit.group(1).strip()}"
    return "Answer: unknown"


def judge_responder(request: ChatRequest) -> str:
    text = request.last_user_text
    gold = canonical_text(_field(text, "Gold answer:") or "").rstrip(".")
    pred = canonical_text(_field(text, "Predicted answer:") or "").rstrip(".")
    if pred in ("", "unknown", "i don't know"):
        verdict = "missing"
    elif gold and gold in pred:
        verdict = "correct"
    else:
        verdict = "incorrect"
    return json.dumps({"verdict": verdict})


def responders() -> dict[str, Callable[[ChatRequest], str]]:
    return {"qa:": qa_responder, "qc:": qc_responder, "answer:": answer_responder, "judge:": judge_responder}


# --------------------------------------------------------------------------
# Bundle
# --------------------------------------------------------------------------


DEFAULT_TARGETS = {
    "SingleHop": 4,
    "SingleHopConditional": 3,
    "MultiHop": 4,
    "MultiHopDifficult": 3,
    "Counterfactual": 3,
    "OpenEnded": 3,
}


def bundle_config() -> dict:
    return {
        "domain_id": DOMAIN_ID,
        "selection": {"categories": list(CATEGORIES), "window": list(WINDOW), "keywords": [],
                      "keyword_scope": "full_text", "source": {"kind": "local", "path": "corpus"}},
        "backend": {"kind": "mock", "script": "extract_script.json", "responders": "synthetic"},
        "schema": "schema.json",
        "facts": "facts.jsonl",
        "seeds": {"sampling": 7, "hnsw": 0},
        "generation": {"targets": dict(DEFAULT_TARGETS)},
        "evaluation": {"methods": ["IO", "CoT", "SC", "RAG", "OneHopKG", "RagPlusOneHopKG"], "runs": 5, "top_k": 3},
    }


def write_bundle(out_dir: str | Path) -> None:
    out = Path(out_dir)
    world = build_world()
    docs, mentions = build_documents(world)
    write_jsonl(out / "corpus" / "documents.jsonl", (d.to_json() for d in docs))
    script = extraction_script(world, mentions)
    (out / "extract_script.json").write_text(dumps(script) + "\n", encoding="utf-8")
    write_json(out / "schema.json", schema_json())
    facts = planted_facts(world)
    write_jsonl(out / "facts.jsonl", ({"fact_id": f"F{i + 1:03d}", "text": f.text()} for i, f in enumerate(facts)))
    write_json(out / "config.json", bundle_config())


def bundled_path() -> Path:
    """Directory of the synthetic bundle shipped inside the package."""
    return Path(str(resources.files("benchforge").joinpath("data", "synthetic")))


def main(argv: Sequence[str] | None = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    write_bundle(args[0] if args else bundled_path())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
