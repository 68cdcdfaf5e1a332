"""Command-line surface: ingest, run, ask, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import __version__, explorer
from .corpus import (
    ChunkingConfig,
    CorpusError,
    HashedNgramEmbedder,
    RemoteEmbedder,
    VectorIndex,
    embedder_from_tag,
    ingest,
)
from .domain import RunConfig, validate_question
from .gateway import GatewayError, build_gateway
from .harness import (
    DatasetError,
    compute_metrics,
    load_config,
    load_dataset,
    read_records,
    run_benchmark,
    summary_text,
    write_report,
)
from .pipeline import answer_question

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragtriad",
        description="Multi-round retrieval QA engine: ingest corpora, run benchmarks, ask questions.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="build a vector index from corpus JSONL files")
    p_ingest.add_argument("--corpus", nargs="+", required=True, help="corpus JSONL file(s)")
    p_ingest.add_argument("--index", required=True, help="output index directory")
    p_ingest.add_argument("--chunk-max", type=int, default=1000)
    p_ingest.add_argument("--chunk-overlap", type=int, default=200)
    p_ingest.add_argument("--embedder", choices=["mock", "remote"], default="mock")
    p_ingest.add_argument("--dim", type=int, default=64, help="embedding dimension")
    p_ingest.add_argument("--seed", type=int, default=0, help="mock embedder seed")
    p_ingest.add_argument("--remote-endpoint", help="embedding service URL (remote embedder)")

    p_run = sub.add_parser("run", help="evaluate a dataset end to end")
    p_run.add_argument("--dataset", required=True)
    p_run.add_argument("--task-kind", choices=["mcq4", "yn", "ynm"], default="mcq4")
    p_run.add_argument("--index", required=True)
    p_run.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p_run)

    p_ask = sub.add_parser("ask", help="run a single question and print every stage")
    p_ask.add_argument("--index", required=True)
    p_ask.add_argument("--dataset", help="dataset JSONL to pick the question from")
    p_ask.add_argument("--id", help="question id within --dataset")
    p_ask.add_argument("--stem", help="question text (instead of --dataset/--id)")
    p_ask.add_argument("--options", help='JSON object label->text, e.g. \'{"A": "..."}\'')
    p_ask.add_argument("--task-kind", choices=["mcq4", "yn", "ynm"], default="mcq4")
    _add_config_flags(p_ask)

    p_report = sub.add_parser("report", help="recompute summaries from stored records")
    p_report.add_argument("--records", required=True)
    p_report.add_argument("--out", help="output directory (default: print only)")

    return parser


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--t-max", type=int, dest="t_max")
    parser.add_argument("--k", type=int)
    parser.add_argument("--m", type=int)
    parser.add_argument("--backend", choices=["mock", "http"])
    parser.add_argument("--mock-script", dest="mock_script")
    parser.add_argument(
        "--script-exhausted",
        choices=["error", "repeat_last"],
        dest="on_script_exhausted",
        help="behavior when a mock script runs out of responses",
    )
    parser.add_argument("--base-url", dest="base_url")
    parser.add_argument("--model")
    parser.add_argument("--remote-endpoint", dest="remote_endpoint",
                        help="override the embedding service URL stored in the index")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--cache", action="store_const", const=True, dest="cache_enabled")
    parser.add_argument("--cache-dir", dest="cache_dir")
    parser.add_argument(
        "--deterministic-timing",
        action="store_const",
        const=True,
        dest="deterministic_timing",
        help="record zero wall times for byte-stable outputs",
    )
    parser.add_argument(
        "--no-interpreter",
        action="store_const",
        const=True,
        dest="skip_interpreter",
        help="ablation: raw stem as the initial query",
    )
    parser.add_argument(
        "--single-round",
        action="store_const",
        const=True,
        dest="single_round",
        help="ablation: one retrieval round regardless of t_max",
    )
    parser.add_argument(
        "--no-adjudication",
        action="store_const",
        const=True,
        dest="skip_adjudication",
        help="ablation: answer directly from the evidence set",
    )


_CONFIG_KEYS = (
    "t_max",
    "k",
    "m",
    "backend",
    "mock_script",
    "on_script_exhausted",
    "base_url",
    "model",
    "workers",
    "seed",
    "cache_enabled",
    "cache_dir",
    "deterministic_timing",
    "skip_interpreter",
    "single_round",
    "skip_adjudication",
)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key, None) for key in _CONFIG_KEYS}
    return load_config(getattr(args, "config", None), overrides)


def _cmd_ingest(args: argparse.Namespace) -> int:
    if args.embedder == "mock":
        embedder = HashedNgramEmbedder(dimension=args.dim, seed=args.seed)
    else:
        if not args.remote_endpoint:
            print("error: --remote-endpoint is required with --embedder remote", file=sys.stderr)
            return 2
        embedder = RemoteEmbedder(endpoint=args.remote_endpoint, dimension=args.dim)
    chunking = ChunkingConfig(max_chars=args.chunk_max, overlap=args.chunk_overlap)
    index = ingest(args.corpus, chunking, embedder)
    index.save(args.index)
    print(json.dumps(index.manifest(), indent=2, sort_keys=True))
    return 0


def _load_index(args: argparse.Namespace):
    index = VectorIndex.load(args.index)
    endpoint = getattr(args, "remote_endpoint", None)
    embedder = embedder_from_tag(index.embedder_tag, endpoint_override=endpoint)
    return index, embedder


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    index, embedder = _load_index(args)
    questions, errors = load_dataset(args.dataset, args.task_kind)
    if errors:
        print(f"rejected {len(errors)} malformed dataset line(s)", file=sys.stderr)
    gateway = build_gateway(config)
    result = run_benchmark(questions, config, index, embedder, gateway)
    paths = write_report(args.out, result.metrics, result.records)
    print(summary_text(result.metrics))
    print(f"records: {paths['records']}")
    return 0


def _cmd_ask(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    index, embedder = _load_index(args)

    if args.dataset and args.id:
        questions, _ = load_dataset(args.dataset, args.task_kind)
        matches = [q for q in questions if q.id == args.id]
        if not matches:
            print(f"error: question {args.id!r} not found in {args.dataset}", file=sys.stderr)
            return 2
        question = matches[0]
    elif args.stem and args.options:
        question = validate_question(
            {"id": "cli", "question": args.stem, "options": json.loads(args.options)},
            args.task_kind,
        )
    else:
        print("error: provide --dataset/--id or --stem/--options", file=sys.stderr)
        return 2

    gateway = build_gateway(config)
    record = answer_question(question, index, embedder, gateway, config)

    if record.schema_ is not None:
        print("== schema ==")
        print(explorer.render_schema(record.schema_))
    if record.trajectory is not None:
        print("== trajectory ==")
        print(json.dumps(record.trajectory.model_dump(mode="json"), indent=2, ensure_ascii=False))
    if record.report is not None:
        print("== report ==")
        print(json.dumps(record.report.model_dump(mode="json"), indent=2, ensure_ascii=False))
    if record.error is not None:
        print("== error ==")
        print(record.error)
    print("== answer ==")
    print(record.prediction if record.prediction is not None else "(abstained)")
    return 0 if record.error is None else 1


def _cmd_report(args: argparse.Namespace) -> int:
    records = read_records(args.records)
    metrics = compute_metrics(records)
    print(summary_text(metrics))
    if args.out:
        write_report(args.out, metrics)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "ingest": _cmd_ingest,
        "run": _cmd_run,
        "ask": _cmd_ask,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (OSError, ValueError, CorpusError, GatewayError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
