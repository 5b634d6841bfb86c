"""Compare the compiled kernels with the pure-Python fallback.

Both backends are swapped into ``benchforge.kernels`` in turn, so the timings
cover the real call sites (embedding, HNSW build, HNSW query).

Usage::

    python3 benchmarks/bench_kernels.py [--entities 2000] [--queries 500] [--repeat 3] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import time
from typing import Callable

from benchforge import _pykernels, kernels
from benchforge.gateway import trigram_embed
from benchforge.hnsw import HNSWIndex

logger = logging.getLogger("bench_kernels")

KERNEL_NAMES = ("trigram_counts", "search_layer", "select_neighbors")
DIM = 256


def load_backends() -> dict[str, object]:
    backends: dict[str, object] = {"python": _pykernels}
    try:
        from benchforge import _kernels  # type: ignore[attr-defined]

        backends["cython"] = _kernels
    except ImportError:
        logger.warning("compiled kernels are not built; only the pure-Python backend will be timed")
    return backends


def use(module: object) -> None:
    for name in KERNEL_NAMES:
        setattr(kernels, name, getattr(module, name))


def names(n: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    syl = ("ka", "lo", "mi", "ren", "tus", "vor", "ax", "bel", "cor", "dan", "eph", "fin", "gal", "hex", "ion")
    return [f"method: {''.join(rng.choice(syl) for _ in range(4))} {''.join(rng.choice(syl) for _ in range(3))}"
            for _ in range(n)]


def best_of(repeat: int, fn: Callable[[], object]) -> float:
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def run(entities: int, queries: int, repeat: int) -> dict[str, dict[str, float]]:
    texts = names(entities, 0)
    probes = names(queries, 1)
    results: dict[str, dict[str, float]] = {}
    for label, module in load_backends().items():
        use(module)
        vecs = [trigram_embed(t) for t in texts]
        probe_vecs = [trigram_embed(t) for t in probes]

        def build() -> HNSWIndex:
            index = HNSWIndex(DIM, capacity=entities)
            for i, v in enumerate(vecs):
                index.add(str(i), v)
            return index

        index = build()
        results[label] = {
            "embed_s": best_of(repeat, lambda: [trigram_embed(t) for t in texts]),
            "build_s": best_of(repeat, build),
            "query_s": best_of(repeat, lambda: [index.search(v, 10) for v in probe_vecs]),
        }
        logger.info("%s: %s", label, results[label])
    use(load_backends().get("cython", _pykernels))
    return results


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--entities", type=int, default=2000)
    parser.add_argument("--queries", type=int, default=500)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--json", help="also write the timings to this file")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    results = run(args.entities, args.queries, args.repeat)
    print(f"{args.entities} entities, {args.queries} queries (top-10), best of {args.repeat}")
    print(f"{'phase':<10}" + "".join(f"{b:>12}" for b in results) + ("     speedup" if len(results) > 1 else ""))
    for phase in ("embed_s", "build_s", "query_s"):
        row = f"{phase[:-2]:<10}" + "".join(f"{results[b][phase]:>11.3f}s" for b in results)
        if "cython" in results:
            row += f"{results['python'][phase] / results['cython'][phase]:>11.1f}x"
        print(row)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
