"""Command-line entry point: ``validate``, ``run``, ``bench``, ``report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .bench import BenchPlan, load_backend, load_pipeline, parse_strategies, run_bench
from .clock import CLOCKS
from .engine import RunConfig, run
from .errors import ConfigError, HardFailure, TransportError
from .faults import parse_injection
from .metrics import build_tables, read_records, render_csv, render_text, write_records
from .pipeline import Strategy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_HARD_FAILURE = 3
EXIT_TRANSPORT = 4


def cmd_validate(args: argparse.Namespace) -> int:
    pipeline = load_pipeline(args.pipeline)
    print(f"valid: {pipeline.id} ({len(pipeline.subtasks)} subtasks, {len(pipeline.edges)} edges)")
    return EXIT_OK


def _injection(tokens: Sequence[str] | None):
    return parse_injection(tokens) if tokens else None


def cmd_run(args: argparse.Namespace) -> int:
    pipeline = load_pipeline(args.pipeline)
    backend = load_backend(args.backend)
    config = RunConfig(Strategy(args.strategy), seed=args.seed, injection=_injection(args.inject), clock=args.clock)
    code = EXIT_OK
    try:
        report = run(pipeline, config, backend, run_index=args.run_index)
    except HardFailure as exc:
        report, code = exc.report, EXIT_HARD_FAILURE
        print(f"hard failure: {exc}", file=sys.stderr)
    if args.records:
        with open(args.records, "w", encoding="utf-8") as fh:
            write_records([report], fh)
    summary = report.summary()
    summary.pop("state")
    print(json.dumps(summary, indent=2))
    return code


def cmd_bench(args: argparse.Namespace) -> int:
    plan = BenchPlan(
        pipeline=load_pipeline(args.pipeline),
        strategies=parse_strategies(args.strategies),
        repetitions=args.repetitions,
        injection=_injection(args.inject),
        seed=args.seed,
        clock=args.clock,
        jobs=args.jobs,
    )
    reports = run_bench(plan, load_backend(args.backend))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        write_records(reports, fh)
    tables = build_tables(reports)
    text = "\n".join(render_text(t) for t in tables)
    (out / "table.txt").write_text(text, encoding="utf-8")
    (out / "table.csv").write_text(render_csv(tables), encoding="utf-8")
    print(text, end="")
    failed = sum(t.hard_failures() for t in tables)
    return EXIT_HARD_FAILURE if failed else EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        with open(args.records, encoding="utf-8") as fh:
            reports = read_records(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.records}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad record stream: {exc}") from None
    tables = build_tables(reports)
    if args.format == "csv":
        print(render_csv(tables), end="")
    else:
        print("\n".join(render_text(t) for t in tables), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskdecomp", description="Run decomposed LLM pipelines and compare strategies.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log retries and transport errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a pipeline config")
    p.add_argument("pipeline", help="bundled name (uc1, uc2) or config path")
    p.set_defaults(func=cmd_validate)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--pipeline", required=True, help="bundled name (uc1, uc2) or config path")
        p.add_argument("--backend", required=True, help="mock:<script name or path> or http:<config path>")
        p.add_argument("--inject", nargs="+", metavar="KEY=VALUE",
                       help="fault injection: target=<id> attempt=<n> mode=<drop_field|corrupt_response> path=<path>")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--clock", choices=sorted(CLOCKS), default="simulated")

    p = sub.add_parser("run", help="execute one run")
    common(p)
    p.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    p.add_argument("--records", help="write the record stream (JSONL) here")
    p.add_argument("--run-index", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run repetitions of each strategy and emit comparison tables")
    common(p)
    p.add_argument("--strategies", default="monolithic,static,rstd")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--out-dir", default="bench-out")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="re-render tables from a record stream")
    p.add_argument("records")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
