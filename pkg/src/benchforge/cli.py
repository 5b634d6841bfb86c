"""``forge``: run benchmark construction stages from one JSON config.

Examples::

    forge ingest --config run.json --out work/
    forge build-kg --config run.json --out work/ --tau 0.9
    forge run --config run.json --out work/      # every stage in order
    forge demo --out work/                       # bundled synthetic domain
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .config import ForgeConfig, load_config
from .gateway import ConfigurationError, ContractViolation, InsufficientDataError, TransportError
from .graph import GraphError
from .pipeline import Pipeline, StageResult
from .serde import FormatError, dumps

logger = logging.getLogger("benchforge")

STAGES = ("ingest", "build-kg", "sample-paths", "gen-qa", "qc", "eval", "stats")
EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forge", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="JSON run configuration")
    _add_run_options(common)

    for name in STAGES + ("run",):
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "run" else "run all stages")
        if name in ("build-kg", "run"):
            _add_alignment_options(p)

    demo = sub.add_parser("demo", help="run every stage on the bundled synthetic domain")
    _add_run_options(demo, out_required=True)
    _add_alignment_options(demo)

    export = sub.add_parser("export-sample", parents=[common], help="sample benchmark pairs for manual review")
    export.add_argument("-n", type=int, default=20, help="number of pairs (default 20)")
    export.add_argument("--seed", type=int, default=0)
    return parser


def _add_run_options(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="worker threads for parallel stages (1 = fully serial)")
    p.add_argument("--out", type=Path, required=out_required, help="artifact directory (overrides config 'out')")
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def _add_alignment_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=float, help="entity merge threshold")
    p.add_argument("--hnsw-m", type=int, help="HNSW out-degree M")
    p.add_argument("--ef-construction", type=int, help="HNSW build beam width")
    p.add_argument("--ef-search", type=int, help="HNSW query beam width")


def apply_overrides(config: ForgeConfig, args: argparse.Namespace) -> ForgeConfig:
    """Re-validate ``config`` with command-line threshold overrides applied."""
    data = config.model_dump(by_alias=True)
    data["base_dir"] = config.base_dir
    if getattr(args, "tau", None) is not None:
        data["alignment"]["tau"] = args.tau
    for flag, key in (("hnsw_m", "m"), ("ef_construction", "ef_construction"), ("ef_search", "ef_search")):
        value = getattr(args, flag, None)
        if value is not None:
            data["hnsw"][key] = value
    try:
        return ForgeConfig.model_validate(data)
    except ValueError as exc:
        raise ConfigurationError(f"invalid override: {exc}") from None


def _report(result: StageResult) -> None:
    print(f"{result.stage}: {dumps(result.summary)}")


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    try:
        if args.command == "demo":
            from .synthetic import bundled_path

            config = load_config(bundled_path() / "config.json")
        else:
            config = load_config(args.config)
        config = apply_overrides(config, args)
        pipeline = Pipeline(config, args.out, args.workers)
        if args.command in ("run", "demo"):
            for result in pipeline.run_all():
                _report(result)
        elif args.command == "export-sample":
            _report(pipeline.export_sample(args.n, args.seed))
        else:
            _report(pipeline.stages()[args.command]())
    except (ConfigurationError, FormatError) as exc:
        print(f"forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, ContractViolation, InsufficientDataError, TransportError, OSError) as exc:
        print(f"forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def main() -> None:
    raise SystemExit(run_command())


if __name__ == "__main__":
    main()
