"""
Command-line entry point: `uae-card <command> ...`.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric or
runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from .data import CsvOptions, EncodedTable, InputEncoding, ingest_csv, read_csv_records
from .errors import ValidationError
from .model import DEFAULT_WILDCARD_RATE, ModelConfig, ResMadeModel
from .persistence import load_model, load_table, save_model, save_table
from .report import DEFAULT_SAMPLES, ErrorReport, estimate_queries, evaluate, format_reports, \
    write_report_csv, write_results_csv
from .sampler import SamplerConfig
from .simple_types import Discrepancy, InputStyle, TrainingMode
from .trainer import DEFAULT_REFINE_EPOCHS, TrainingConfig, hybrid_train, incremental_ingest_data, \
    incremental_ingest_workload
from .training_observer import CsvStepLog, LoggingObserver, TrainingObserver
from .workload import WorkloadSpec, generate_partitions, generate_workload, read_queries, read_workload, \
    write_workload

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3

THREADS_ENV = "UAE_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


def _split(text: Optional[str]) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _check_schema(model: ResMadeModel, table: EncodedTable) -> None:
    if model.encoding.names != tuple(c.name for c in table.schema) or \
            model.encoding.domain_sizes != tuple(table.domain_sizes):
        raise ValidationError("model and table schemas differ")


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    options = CsvOptions(header=not args.no_header, delimiter=args.delimiter,
                         numeric_columns=_split(args.numeric))
    table = ingest_csv(args.csv, options)
    save_table(table, args.out)
    return EXIT_OK


def cmd_schema(args: argparse.Namespace) -> int:
    table = load_table(args.table)
    print(json.dumps({"rows": table.row_count, "columns": table.schema_summary()}, indent=2))
    return EXIT_OK


def cmd_gen_workload(args: argparse.Namespace) -> int:
    table = load_table(args.table)
    spec = WorkloadSpec(
        bounded_column=args.bounded_column,
        target_volume=args.target_volume,
        n_filters_min=args.filters_min,
        train_count=args.train_count,
        test_count=args.test_count,
        seed=args.seed,
        center_range=(args.center_low, args.center_high),
    )
    out = Path(args.out)
    if args.partitions is None:
        parts = [(out, generate_workload(table, spec))]
    else:
        parts = [(out / f"part{k + 1}", w) for k, w in enumerate(generate_partitions(table, spec, args.partitions))]
    for directory, workload in parts:
        directory.mkdir(parents=True, exist_ok=True)
        write_workload(directory / "train.jsonl", workload.train)
        write_workload(directory / "test_in_workload.jsonl", workload.test_in_workload)
        write_workload(directory / "test_random.jsonl", workload.test_random)
        logger.info("wrote workload to %s", directory)
    return EXIT_OK


def _training_config(args: argparse.Namespace, mode: TrainingMode,
                     epochs: Optional[int] = None) -> TrainingConfig:
    eval_path = getattr(args, "eval_workload", None)
    return TrainingConfig(
        lam=args.lam,
        data_batch=args.batch,
        query_batch=args.query_batch,
        epochs=args.epochs if epochs is None else epochs,
        lr=args.lr,
        sampler=SamplerConfig(tau=args.tau, samples=args.samples, rng_seed=args.seed),
        mode=mode,
        discrepancy=Discrepancy(args.discrepancy),
        wildcard_rate=args.wildcard_rate,
        seed=args.seed,
        eval_queries=tuple(read_workload(eval_path)) if eval_path else (),
    )


def _observer(log_path: Optional[str]) -> tuple[TrainingObserver, Optional[CsvStepLog]]:
    observer = TrainingObserver([LoggingObserver()])
    step_log = None
    if log_path:
        step_log = CsvStepLog(log_path)
        observer.attach(step_log)
    return observer, step_log


def cmd_train(args: argparse.Namespace) -> int:
    table = load_table(args.table)
    mode = TrainingMode(args.mode)
    workload = read_workload(args.workload) if args.workload else []
    config = _training_config(args, mode)
    if args.init_model:
        model = load_model(args.init_model)
        _check_schema(model, table)
    else:
        encoding = InputEncoding.for_table(table, InputStyle(args.input_encoding))
        model_config = ModelConfig(hidden_layers=args.hidden_layers, hidden_units=args.hidden_units,
                                   seed=args.seed)
        model = ResMadeModel.build(model_config, encoding)
    observer, step_log = _observer(args.log)
    try:
        hybrid_train(model, table, workload, config, observer, args.checkpoint_dir)
    finally:
        if step_log is not None:
            step_log.close()
    save_model(model, args.out)
    logger.info("saved model to %s (%d parameters, %.1f KB)",
                args.out, model.num_parameters(), model.size_bytes() / 1024.0)
    return EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    table = load_table(args.table)
    _check_schema(model, table)
    queries = read_queries(args.workload)
    results = estimate_queries(model, table, queries, args.samples, args.seed, worker_count())
    if args.out:
        write_results_csv(args.out, results)
    else:
        for r in results:
            print(f"{r.index}\t{r.est_card:.3f}\t{r.latency_ms:.3f}ms")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    table = load_table(args.table)
    _check_schema(model, table)
    reports: dict[str, ErrorReport] = {}
    for path in args.workload:
        labeled = read_workload(path)
        results, report = evaluate(model, table, labeled, args.samples, args.seed, worker_count())
        suite = Path(path).stem
        reports[suite] = report
        if args.results_dir:
            Path(args.results_dir).mkdir(parents=True, exist_ok=True)
            write_results_csv(Path(args.results_dir) / f"{suite}.csv", results)
    if args.out:
        write_report_csv(args.out, reports)
    print(format_reports(reports))
    return EXIT_OK


def cmd_refine(args: argparse.Namespace) -> int:
    if (args.new_data is None) == (args.new_workload is None):
        raise ValidationError("refine takes exactly one of --new-data and --new-workload")
    model = load_model(args.model)
    table = load_table(args.table)
    _check_schema(model, table)
    observer, step_log = _observer(args.log)
    try:
        if args.new_data is not None:
            config = _training_config(args, TrainingMode.DATA_ONLY, args.epochs)
            options = CsvOptions(header=not args.no_header, delimiter=args.delimiter)
            names, body, _ = read_csv_records(args.new_data, options)
            if options.header and names != [c.name for c in table.schema]:
                raise ValidationError(f"new data columns {names} do not match the table")
            codes = table.encode_rows([[None if text == "" else text for text in row] for row in body])
            incremental_ingest_data(model, table, codes, args.epochs, config, observer)
            if args.table_out:
                save_table(table.with_rows(codes), args.table_out)
        else:
            config = _training_config(args, TrainingMode.QUERY_ONLY, args.epochs)
            incremental_ingest_workload(model, table, read_workload(args.new_workload),
                                        args.epochs, config, observer)
    finally:
        if step_log is not None:
            step_log.close()
    save_model(model, args.out or args.model)
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------

def _add_training_flags(parser: argparse.ArgumentParser, epochs: int) -> None:
    parser.add_argument("--lambda", dest="lam", type=float, default=1e-4, help="weight of the query loss")
    parser.add_argument("--tau", type=float, default=1.0, help="Gumbel-Softmax temperature")
    parser.add_argument("--samples", type=int, default=DEFAULT_SAMPLES, help="DPS samples per query")
    parser.add_argument("--epochs", type=int, default=epochs)
    parser.add_argument("--lr", type=float, default=2e-4)
    parser.add_argument("--batch", type=int, default=512, help="rows per step")
    parser.add_argument("--query-batch", type=int, default=64, help="queries per step")
    parser.add_argument("--discrepancy", choices=[d.value for d in Discrepancy], default="qerror")
    parser.add_argument("--wildcard-rate", type=float, default=DEFAULT_WILDCARD_RATE)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--log", help="per-step CSV log")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uae-card", description="Learned cardinality estimation with UAE.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="dictionary-encode a CSV file")
    p.add_argument("csv")
    p.add_argument("--out", required=True)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--numeric", help="comma-separated numeric columns")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("schema", help="print the schema of a table file")
    p.add_argument("--table", required=True)
    p.set_defaults(func=cmd_schema)

    p = sub.add_parser("gen-workload", help="generate labeled training and test queries")
    p.add_argument("--table", required=True)
    p.add_argument("--bounded-column", required=True)
    p.add_argument("--target-volume", type=float, default=0.01)
    p.add_argument("--filters-min", type=int, default=5)
    p.add_argument("--train-count", type=int, default=20000)
    p.add_argument("--test-count", type=int, default=2000)
    p.add_argument("--center-low", type=float, default=0.1)
    p.add_argument("--center-high", type=float, default=0.9)
    p.add_argument("--partitions", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_workload)

    p = sub.add_parser("train", help="train a model (data-only, query-only or hybrid)")
    p.add_argument("--table", required=True)
    p.add_argument("--workload")
    p.add_argument("--mode", choices=[m.value for m in TrainingMode], default="hybrid")
    p.add_argument("--init-model", help="warm start from a saved model")
    p.add_argument("--input-encoding", choices=[s.value for s in InputStyle], default="binary")
    p.add_argument("--hidden-layers", type=int, default=2)
    p.add_argument("--hidden-units", type=int, default=128)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--eval-workload", help="labeled queries evaluated after every epoch")
    p.add_argument("--out", required=True)
    _add_training_flags(p, epochs=20)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="estimate cardinalities with progressive sampling")
    p.add_argument("--model", required=True)
    p.add_argument("--table", required=True, help="table file providing the dictionaries")
    p.add_argument("--workload", required=True)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="q-error statistics of labeled workloads")
    p.add_argument("--model", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--workload", required=True, action="append")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="summary CSV")
    p.add_argument("--results-dir", help="per-query CSV files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refine", help="incremental training on new data or a new workload")
    p.add_argument("--model", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--new-data")
    p.add_argument("--new-workload")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--table-out", help="write the table extended with the new rows")
    p.add_argument("--out", help="output model (default: overwrite --model)")
    _add_training_flags(p, epochs=DEFAULT_REFINE_EPOCHS)
    p.set_defaults(func=cmd_refine)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except ValueError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ArithmeticError, RuntimeError, OSError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
