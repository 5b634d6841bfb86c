"""Pipeline stages behind the ``forge`` command.

Every stage reads declared upstream artifacts from the output directory,
writes its own artifacts and then a manifest under ``manifests/`` holding
content hashes of inputs and outputs, the config hash and the seeds. A stage
refuses to run when an upstream file is missing or no longer matches the
hash its producer recorded. Manifests carry no timestamps, so reruns with
the same config on mock backends are byte-identical.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .alignment import EntityIndex, PredicateSchema, RelationNormalizer, apply_update, extract_corpus
from .config import ForgeConfig
from .corpus import Chunk, ChunkPolicy, Corpus, LocalDirectorySource, SelectionCriteria, chunk_corpus, collect
from .evaluation import (
    ChunkIndex,
    EmbeddingMatcher,
    EntityLinker,
    MethodParams,
    fact_recovery_rate,
    run_benchmark,
)
from .gateway import ConfigurationError, Gateway, HttpBackend, MockBackend, UsageLedger, report_usage
from .graph import KnowledgeGraph, id_number
from .paths import SamplingPolicy
from .qa import Plan, PlanEntry, QAPair, generate_all, plan_generation
from .qc import run_qc
from .serde import dumps, parse_time, read_json, read_jsonl, sha256_file, sha256_text, write_json, write_jsonl

logger = logging.getLogger(__name__)

DOCUMENTS = "documents.jsonl"
CHUNKS = "chunks.jsonl"
KG_DIR = "kg"
KG_FILES = ("kg/entities.jsonl", "kg/relations.jsonl", "kg/manifest.json")
PATHS = "paths.jsonl"
QA = "qa.jsonl"
BENCHMARK = "benchmark.jsonl"
REPORT = "report.json"

# stage -> declared inputs (relative to the output directory)
STAGE_INPUTS: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "build-kg": (DOCUMENTS,),
    "sample-paths": KG_FILES,
    "gen-qa": (DOCUMENTS, PATHS) + KG_FILES,
    "qc": (DOCUMENTS, QA),
    "eval": (DOCUMENTS, CHUNKS, BENCHMARK) + KG_FILES,
    "stats": ("usage_build-kg.json",) + KG_FILES,
}


class MissingArtifactError(ConfigurationError):
    """An upstream artifact is absent or was modified after its stage wrote it."""


@dataclass
class StageResult:
    stage: str
    outputs: dict[str, str]
    summary: dict


class Pipeline:
    """Runs stages for one validated config against one output directory."""

    def __init__(self, config: ForgeConfig, out_dir: str | Path | None = None, workers: int = 1,
                 gateway: Gateway | None = None) -> None:
        self.config = config
        self.out = Path(out_dir) if out_dir is not None else config.out_dir
        self.workers = max(1, workers)
        self._gateway = gateway

    # -- plumbing --

    @property
    def config_hash(self) -> str:
        data = self.config.model_dump(mode="json", by_alias=True, exclude={"out", "base_dir"})
        return sha256_text(dumps(data))

    def path(self, name: str) -> Path:
        return self.out / name

    def gateway(self) -> Gateway:
        if self._gateway is None:
            self._gateway = build_gateway(self.config)
        return self._gateway

    def schema(self) -> PredicateSchema:
        return PredicateSchema.load(self.config.resolve(self.config.schema_path))

    def _recorded_hashes(self) -> dict[str, str]:
        recorded: dict[str, str] = {}
        manifests = self.out / "manifests"
        if manifests.is_dir():
            for file in sorted(manifests.glob("*.json")):
                recorded.update(read_json(file).get("outputs", {}))
        return recorded

    def require(self, stage: str) -> dict[str, str]:
        """Check the declared inputs of ``stage``; returns their hashes."""
        return self._require_files(STAGE_INPUTS[stage], stage)

    def _require_files(self, names: Sequence[str], stage: str) -> dict[str, str]:
        recorded = self._recorded_hashes()
        hashes = {}
        for name in names:
            p = self.path(name)
            if not p.is_file():
                raise MissingArtifactError(f"{stage}: missing upstream artifact {name} (looked in {self.out})")
            digest = sha256_file(p)
            if name in recorded and recorded[name] != digest:
                raise MissingArtifactError(f"{stage}: upstream artifact {name} changed after it was written")
            hashes[name] = digest
        return hashes

    def _finish(self, stage: str, inputs: dict[str, str], outputs: list[str], summary: dict,
                seed: object = None) -> StageResult:
        out_hashes = {name: sha256_file(self.path(name)) for name in outputs}
        manifest = {
            "stage": stage,
            "pipeline_version": __version__,
            "config_sha256": self.config_hash,
            "seeds": self.config.seeds.model_dump() if seed is None else seed,
            "inputs": inputs,
            "outputs": out_hashes,
            "summary": summary,
        }
        write_json(self.out / "manifests" / f"{stage}.json", manifest)
        logger.info("%s: %s", stage, summary)
        return StageResult(stage, out_hashes, summary)

    def corpus(self) -> Corpus:
        return Corpus.read_jsonl(self.path(DOCUMENTS), self.config.domain_id)

    def graph(self) -> KnowledgeGraph:
        graph = KnowledgeGraph.load(self.path(KG_DIR))
        graph.check_domain(self.config.domain_id)
        return graph

    def _write_usage(self, stage: str, ledger: UsageLedger) -> str:
        name = f"usage_{stage}.json"
        write_json(self.path(name), ledger.to_dict())
        return name

    # -- stages --

    def ingest(self) -> StageResult:
        inputs = self.require("ingest")
        sel = self.config.selection
        criteria = SelectionCriteria(
            self.config.domain_id, tuple(sel.categories), parse_time(sel.window[0]), parse_time(sel.window[1]),
            tuple(sel.keywords), sel.keyword_scope,
        )
        if sel.source.kind == "local":
            source = LocalDirectorySource(self.config.resolve(sel.source.path))
        else:
            from .arxiv import AtomCatalogSource

            kwargs = {"max_results": sel.source.max_results}
            if sel.source.endpoint:
                kwargs["endpoint"] = sel.source.endpoint
            source = AtomCatalogSource(criteria, **kwargs)
        corpus = collect(source, criteria)
        corpus.write_jsonl(self.path(DOCUMENTS))
        policy = ChunkPolicy(self.config.chunk.limit, self.config.chunk.overlap)
        chunks = chunk_corpus(corpus, policy, self.workers)
        write_jsonl(self.path(CHUNKS), (c.to_json() for c in chunks))
        return self._finish("ingest", inputs, [DOCUMENTS, CHUNKS],
                            {"documents": len(corpus), "chunks": len(chunks)})

    def build_kg(self) -> StageResult:
        inputs = self.require("build-kg")
        corpus = self.corpus()
        if len(corpus) == 0:
            raise ConfigurationError("build-kg: the corpus is empty")
        gateway = self.gateway()
        gateway.ledger = UsageLedger()
        schema = self.schema()
        sel = self.config.selection
        graph = KnowledgeGraph(self.config.domain_id, (parse_time(sel.window[0]), parse_time(sel.window[1])))
        batches, failures = extract_corpus(list(corpus), gateway, schema, self.workers)
        dim = len(gateway.embed(corpus.documents[0].id))
        hn = self.config.hnsw
        index = EntityIndex(gateway.embed, dim, m=hn.m, ef_construction=hn.ef_construction, ef_search=hn.ef_search,
                            seed=self.config.seeds.hnsw, capacity=1024)
        normalizer = RelationNormalizer(schema, gateway.embed, self.config.alignment.normalize_threshold,
                                        seed=self.config.seeds.hnsw)
        delta = apply_update(graph, index, batches, normalizer, self.config.alignment.tau, self.config.domain_id)
        graph.persist(self.path(KG_DIR))
        write_jsonl(self.path("extraction_failures.jsonl"),
                    ({"doc_id": f.doc_id, "reason": f.reason} for f in sorted(failures, key=lambda f: f.doc_id)))
        write_json(self.path("kg_update.json"), {
            **delta.summary(),
            "rejected_relations": [list(r) for r in delta.relations_rejected],
            "deferred_candidates": [list(d) for d in delta.deferred],
        })
        usage = self._write_usage("build-kg", gateway.ledger)
        summary = {"documents": len(corpus), "extraction_failures": len(failures), **delta.summary(),
                   "entities": len(graph.entities), "edges": len(graph.edges)}
        return self._finish("build-kg", inputs,
                            list(KG_FILES) + ["extraction_failures.jsonl", "kg_update.json", usage], summary)

    def sample_paths(self) -> StageResult:
        inputs = self.require("sample-paths")
        graph = self.graph()
        gen = self.config.generation
        seed = self.config.seeds.sampling
        policy = SamplingPolicy(tuple(gen.k_range), "uniform", gen.degree_percentile, gen.max_attempts, seed)
        plan = plan_generation(graph.snapshot(), gen.targets, policy, random.Random(seed), self.schema().predicates)
        write_jsonl(self.path(PATHS), (_plan_row(e) for e in plan.entries))
        return self._finish("sample-paths", inputs, [PATHS],
                            {"paths": len(plan), "per_type": plan.counts(), "shortfall": plan.shortfall})

    def gen_qa(self) -> StageResult:
        inputs = self.require("gen-qa")
        graph = self.graph()
        corpus = self.corpus()
        plan = Plan([_plan_entry(row) for row in read_jsonl(self.path(PATHS))])
        gateway = self.gateway()
        gateway.ledger = UsageLedger()
        pairs, abstained = generate_all(plan, graph.snapshot(), corpus, gateway, self.config.domain_id,
                                        self.config.generation.exemplars, self.workers)
        write_jsonl(self.path(QA), (p.to_json() for p in pairs))
        write_jsonl(self.path("abstentions.jsonl"), (a.to_json() for a in abstained))
        usage = self._write_usage("gen-qa", gateway.ledger)
        return self._finish("gen-qa", inputs, [QA, "abstentions.jsonl", usage],
                            {"generated": len(pairs), "abstained": len(abstained)})

    def qc(self) -> StageResult:
        inputs = self.require("qc")
        corpus = self.corpus()
        pairs = [QAPair.from_json(r) for r in read_jsonl(self.path(QA))]
        contexts = {p.qa_id: evidence_context(p, corpus) for p in pairs}
        gateway = self.gateway()
        gateway.ledger = UsageLedger()
        result = run_qc(pairs, contexts, gateway, gateway.embed, self.config.qc.dedup_threshold, self.workers)
        write_jsonl(self.path("qc_report.jsonl"), result.report_rows())
        write_jsonl(self.path(BENCHMARK), [self.benchmark_header(len(result.kept))]
                    + [p.to_json() for p in result.kept])
        usage = self._write_usage("qc", gateway.ledger)
        per_type: dict[str, int] = {}
        for p in result.kept:
            per_type[p.qtype.value] = per_type.get(p.qtype.value, 0) + 1
        return self._finish("qc", inputs, ["qc_report.jsonl", BENCHMARK, usage],
                            {"input_pairs": len(pairs), "kept": len(result.kept), "per_type": per_type})

    def benchmark_header(self, count: int) -> dict:
        cfg = self.config
        return {"header": {
            "pipeline_version": __version__,
            "domain_id": cfg.domain_id,
            "config_sha256": self.config_hash,
            "seeds": cfg.seeds.model_dump(),
            "thresholds": {"tau": cfg.alignment.tau, "normalize": cfg.alignment.normalize_threshold,
                           "dedup": cfg.qc.dedup_threshold},
            "window": list(cfg.selection.window),
            "pairs": count,
        }}

    def evaluate(self) -> StageResult:
        inputs = self.require("eval")
        corpus = self.corpus()
        graph = self.graph()
        pairs = read_benchmark(self.path(BENCHMARK))
        gateway = self.gateway()
        gateway.ledger = UsageLedger()
        chunks = [Chunk.from_json(r) for r in read_jsonl(self.path(CHUNKS))]
        ev = self.config.evaluation
        chunk_index = ChunkIndex.build(chunks, corpus, gateway.embed)
        params = MethodParams(ev.top_k, ev.sc_samples, ev.sc_temperature)
        result = run_benchmark(ev.methods, pairs, graph, chunk_index, gateway, ev.runs, params, self.workers,
                               EntityLinker(gateway.embed))
        key = lambda r: (r.method, id_number(r.qa_id), r.run_index)  # noqa: E731
        write_jsonl(self.path("predictions.jsonl"), (p.to_json() for p in sorted(result.predictions, key=key)))
        write_jsonl(self.path("verdicts.jsonl"), (v.to_json() for v in sorted(result.verdicts, key=key)))
        write_json(self.path(REPORT), result.report.to_json())
        usage = self._write_usage("eval", gateway.ledger)
        overall = {m: round(result.report.accuracy(m)["mean"], 4) for m in result.report.correct}
        return self._finish("eval", inputs, ["predictions.jsonl", "verdicts.jsonl", REPORT, usage],
                            {"pairs": len(pairs), "runs": ev.runs, "overall_accuracy": overall})

    def stats(self) -> StageResult:
        inputs = self.require("stats")
        ledger = UsageLedger.from_dict(read_json(self.path("usage_build-kg.json")))
        scaling = report_usage(ledger)
        graph = self.graph()
        out = {"scaling": scaling.to_dict(), "graph": graph.manifest()}
        facts_path = self.config.resolve(self.config.facts)
        if facts_path is not None:
            facts = [row["text"] for row in read_jsonl(facts_path)]
            matcher = EmbeddingMatcher(self.gateway().embed, self.config.evaluation.recovery_threshold)
            out["fact_recovery"] = {"facts": len(facts), "rate": fact_recovery_rate(graph, facts, matcher)}
            inputs["facts"] = sha256_file(facts_path)
        write_json(self.path("stats.json"), out)
        summary = {"token_slope": round(scaling.token_slope, 4)}
        if "fact_recovery" in out:
            summary["fact_recovery"] = out["fact_recovery"]["rate"]
        return self._finish("stats", inputs, ["stats.json"], summary)

    def export_sample(self, n: int, seed: int) -> StageResult:
        """Seeded random sample of benchmark pairs for manual inspection."""
        inputs = self._require_files([BENCHMARK], "export-sample")
        pairs = read_benchmark(self.path(BENCHMARK))
        rng = random.Random(seed)
        picked = sorted(rng.sample(pairs, min(n, len(pairs))), key=lambda p: id_number(p.qa_id))
        write_jsonl(self.path("inspection_sample.jsonl"), (p.to_json() for p in picked))
        return self._finish("export-sample", inputs, ["inspection_sample.jsonl"], {"sampled": len(picked)},
                            seed={"export": seed})

    def run_all(self) -> list[StageResult]:
        return [stage() for stage in self.stages().values()]

    def stages(self) -> dict[str, Callable[[], StageResult]]:
        return {
            "ingest": self.ingest,
            "build-kg": self.build_kg,
            "sample-paths": self.sample_paths,
            "gen-qa": self.gen_qa,
            "qc": self.qc,
            "eval": self.evaluate,
            "stats": self.stats,
        }


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def build_gateway(config: ForgeConfig) -> Gateway:
    be = config.backend
    if be.kind == "mock":
        script = read_json(config.resolve(be.script)) if be.script else {}
        responders = {}
        if be.responders == "synthetic":
            from . import synthetic

            responders = synthetic.responders()
        return Gateway(MockBackend(script, responders))
    backend = HttpBackend(config.base_url(), config.api_key(), be.chat_model, be.embed_model, be.timeout,
                          be.max_attempts)
    return Gateway(backend)


def evidence_context(qa: QAPair, corpus: Corpus) -> str:
    """The evidence spans of ``qa`` as text, in recorded order."""
    return "\n".join(corpus.span_text(r.doc_id, r.section_label, r.start, r.end) for r in qa.evidence_refs)


def read_benchmark(path: str | Path) -> list[QAPair]:
    rows = list(read_jsonl(path))
    if not rows or "header" not in rows[0]:
        raise MissingArtifactError(f"{path} has no provenance header")
    return [QAPair.from_json(r) for r in rows[1:]]


def _plan_row(entry: PlanEntry) -> dict:
    row = entry.path.to_json()
    row["qtype"] = entry.qtype.value
    if entry.perturbation is not None:
        row["perturbation"] = entry.perturbation.to_json()
    return row


def _plan_entry(row: dict) -> PlanEntry:
    data = {"qtype": row["qtype"], "path": row}
    if "perturbation" in row:
        data["perturbation"] = row["perturbation"]
    return PlanEntry.from_json(data)
