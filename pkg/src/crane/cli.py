"""``crane`` command line: train, ingest, query, bench and theory.

Exit codes: 0 success, 1 a theory check failed, 2 usage or parse error,
3 numeric failure (NaN loss).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from crane.evaluation import METHODS, BudgetError, run_benchmark
from crane.io import (ConfigError, ModelFormatError, ParseError, load_config, load_model,
                      parse_edges, save_model)
from crane.training import NumericError, train

log = logging.getLogger("crane")


def _cmd_train(args) -> int:
    cfg, task_cfg = load_config(args.config, seed=args.seed)
    trace = open(args.trace, "w", encoding="utf-8") if args.trace else None

    def write(step, loss):
        if trace is not None:
            trace.write(f"{step}\t{loss!r}\n")
            trace.flush()
        if args.verbose and step % 50 == 0:
            log.info("step %d loss %.6g", step, loss)

    start = time.perf_counter()
    try:
        model, losses = train(cfg, task_cfg, trace=write)
    finally:
        if trace is not None:
            trace.close()
    save_model(args.out, model)
    print(f"trained {cfg.n_tasks} tasks, {len(losses)} steps, final loss {losses[-1]:.6g}, "
          f"{time.perf_counter() - start:.0f} s")
    return 0


def _read_streams(paths):
    parts = [parse_edges(p) for p in paths]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def _cmd_ingest(args) -> int:
    model, updates = load_model(args.model)
    origins, destinations, weights = _read_streams(args.stream)
    model.ingest(origins, destinations, weights)
    save_model(args.out, model, updates + len(weights))
    print(f"ingested {len(weights)} updates; active layers {model.layers}")
    return 0


def _cmd_query(args) -> int:
    model, _ = load_model(args.model)
    origins, destinations, _, _ = parse_edges(args.edges, require_weight=False)
    estimates = model.query_many(origins, destinations) if len(origins) else []
    out = sys.stdout
    for o, d, e in zip(origins.tolist(), destinations.tolist(), np.asarray(estimates).tolist()):
        out.write(f"{o}\t{d}\t{e!r}\n")
    return 0


def _cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = sorted(set(methods) - set(METHODS))
    if unknown or not methods:
        raise ConfigError(f"unknown methods {unknown}; choose from {', '.join(METHODS)}")
    model = load_model(args.model)[0] if "crane" in methods else None
    origins, destinations, weights = _read_streams(args.stream)
    report = run_benchmark(origins, destinations, weights, methods, args.budget, model, args.seed)
    tsv = report.to_tsv()
    sys.stdout.write(tsv)
    if args.report:
        Path(args.report).write_text(tsv, encoding="utf-8")
        text_path = args.report_text or str(args.report) + ".txt"
        Path(text_path).write_text(report.to_text(), encoding="utf-8")
    return 0


def _cmd_theory(args) -> int:
    from crane.theory import theory_suite

    model = load_model(args.model)[0] if args.model else None
    results = theory_suite(args.seed, quick=args.quick, model=model)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\t{r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crane", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train a model on synthetic tasks")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("ingest", help="store edge-list streams into a model's memories")
    p.add_argument("--model", required=True)
    p.add_argument("--stream", required=True, action="append",
                   help="edge list; repeat to ingest several files in order")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("query", help="print an estimate per edge")
    p.add_argument("--model", required=True)
    p.add_argument("--edges", required=True)
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("bench", help="equal-budget accuracy comparison")
    p.add_argument("--model")
    p.add_argument("--stream", required=True, action="append")
    p.add_argument("--budget", type=int, default=65536)
    p.add_argument("--methods", default="crane,tcm,cms")
    p.add_argument("--report")
    p.add_argument("--report-text")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("theory", help="run the property experiments")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="fewer trials")
    p.add_argument("--model", help="trained model whose decoder the variance check uses")
    p.set_defaults(func=_cmd_theory)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.command == "bench" and "crane" in args.methods and not args.model:
        print("error: bench with crane needs --model", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ParseError, ConfigError, BudgetError, ModelFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
