# cli.py
"""Command-line front door: ``generate``, ``run``, ``report`` and ``bench``."""

import argparse
import os
import sys
from collections import Counter

import numpy as np
import pandas as pd

from . import __version__
from .ExperimentConfig import ExperimentConfig
from .GlobalLogger import GlobalLogger
from .data import Dataset, generate_synthetic, load_manifest, save_dataset
from .exceptions import SepalError, ValidationError
from .harness import (SEED_SELECT, Strategy, derive_seed, read_records, run_experiment, time_selection,
                      train_baseline, write_curves, write_records)

RECORDS_NAME = "runs.jsonl"
CURVES_NAME = "curves.csv"
BENCH_NAME = "bench.csv"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def load_dataset(config: ExperimentConfig) -> Dataset:
    ds = config.settings["dataset"]
    if ds["source"] == "manifest":
        return load_manifest(ds["manifest"], max_workers=int(ds["load_workers"]))
    return generate_synthetic(config.synthetic_params())


def cmd_generate(config: ExperimentConfig, out_dir=None) -> str:
    """Generate the configured synthetic dataset and write it to ``out_dir``."""
    logger = GlobalLogger.get_instance().get_logger()
    params = config.synthetic_params()
    out_dir = out_dir or config.output_dir
    dataset = generate_synthetic(params)
    manifest = save_dataset(dataset, out_dir)
    logger.info(f"Generated {len(dataset)} samples ({params.n_train} train / {params.n_eval} eval)")
    print(f"Dataset written to {manifest}")
    return manifest


def cmd_run(config: ExperimentConfig) -> str:
    """Run every configured strategy and trial; returns the run directory."""
    global_logger = GlobalLogger.get_instance()
    logger = global_logger.get_logger()

    dataset = load_dataset(config)
    config.validate_against(dataset)

    run_dir = config.output_dir
    os.makedirs(run_dir, exist_ok=True)
    config_hash = config.config_hash()
    global_logger.set_run_id(config_hash[:12])
    log_path = global_logger.attach_run_directory(run_dir)
    try:
        config.save_snapshot(run_dir)
        logger.info(f"Run {config_hash[:12]} writing to {run_dir} (log: {log_path})")
        report = run_experiment(dataset, config.schedule, [s.value for s in config.strategies], config.learner,
                                config.seed, config_hash, config.jobs, bool(config.settings["progress"]))
        write_records(report.records, os.path.join(run_dir, RECORDS_NAME))
        write_curves(report.curves, os.path.join(run_dir, CURVES_NAME))
    finally:
        global_logger.detach_run_directory()

    final = final_table(report.curves)
    print(final.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    warnings = global_logger.warning_count()
    if warnings:
        print(f"{warnings} warning(s) logged, see {log_path}")
    return run_dir


def final_table(curves: pd.DataFrame) -> pd.DataFrame:
    """Last iteration of every strategy curve, in run order."""
    last = curves.groupby("strategy", sort=False).tail(1)
    return last[["strategy", "labeled_count", "mean_relative_map", "stddev"]].reset_index(drop=True)


def vote_histogram(records) -> dict:
    """Total number of samples that received each vote count, over every VOTE iteration."""
    totals = Counter()
    for record in records:
        if record.strategy != Strategy.VOTE.value:
            continue
        for it in record.iterations:
            totals.update(it.vote_histogram)
    return dict(sorted(totals.items()))


def contribution_totals(records, strategy: str) -> dict:
    totals = Counter()
    for record in records:
        if record.strategy == strategy:
            for it in record.iterations:
                totals.update(it.contributions)
    return dict(totals)


def cmd_report(run_dir) -> str:
    """Render a run directory as text tables."""
    if not os.path.isdir(run_dir):
        raise ValidationError(f"Run directory not found: {run_dir}")
    paths = {name: os.path.join(run_dir, name) for name in (CURVES_NAME, RECORDS_NAME)}
    for name, path in paths.items():
        if not os.path.isfile(path):
            raise ValidationError(f"Missing {name} in {run_dir}: {path}")

    curves = pd.read_csv(paths[CURVES_NAME])
    records = read_records(paths[RECORDS_NAME])
    if curves.empty:
        raise ValidationError(f"{paths[CURVES_NAME]} holds no rows")

    fmt = lambda v: f"{v:.2f}"  # noqa: E731
    lines = ["Final relative mAP (%)", final_table(curves).to_string(index=False, float_format=fmt), ""]

    per_iteration = curves.pivot(index=["iteration", "labeled_count"], columns="strategy",
                                 values="mean_relative_map")
    per_iteration = per_iteration[list(dict.fromkeys(curves["strategy"]))]
    lines += ["Mean relative mAP per iteration", per_iteration.to_string(float_format=fmt), ""]

    ag = contribution_totals(records, Strategy.AG.value)
    if ag:
        lines += ["AG selections contributed per metric",
                  pd.Series(ag, name="samples").to_string(), ""]

    histogram = vote_histogram(records)
    if histogram:
        frame = pd.DataFrame({"votes": list(histogram), "samples": list(histogram.values())})
        lines += ["Vote distribution", frame.to_string(index=False), ""]

    text = "\n".join(lines)
    print(text)
    return text


def bench_table(seconds: dict, single_metrics) -> pd.DataFrame:
    """
    Median selection time per strategy, and AG's relative (%) difference to the mean
    of the single metrics it combines. R is timed but left out of that mean.
    """
    singles = [seconds[m] for m in single_metrics if m in seconds]
    mean_single = float(np.mean(singles))
    rows = [(name, value, 100.0 * (value - mean_single) / mean_single) for name, value in seconds.items()]
    return pd.DataFrame(rows, columns=["strategy", "seconds", "delta_pct"])


def cmd_bench(config: ExperimentConfig) -> pd.DataFrame:
    """Time one selection pass per metric and for AG on a trained baseline."""
    logger = GlobalLogger.get_instance().get_logger()
    dataset = load_dataset(config)
    config.validate_against(dataset)

    bench = config.settings["bench"]
    trial_seed = config.schedule.seeds_for(config.seed)[0]
    labeled, _, params = train_baseline(dataset, config.schedule, trial_seed, config.learner)
    labeled = set(labeled)
    pool = [sid for sid in sorted(dataset.split_ids("train")) if sid not in labeled]
    if bench["pool_size"]:
        pool = pool[:int(bench["pool_size"])]
    n = min(config.schedule.adds[0] if config.schedule.adds else 1, len(pool))
    if n < 1:
        raise ValidationError("The bench pool is empty")
    seed = derive_seed(trial_seed, SEED_SELECT, 1)

    singles = [m.value for m in config.learner.ag_metrics]
    names = singles + [Strategy.AG.value, Strategy.R.value]
    repeats = int(bench["repeats"])
    seconds = {}
    for name in names:
        time_selection(name, pool, params, dataset, n, seed, config.learner)  # warm-up
        runs = [time_selection(name, pool, params, dataset, n, seed, config.learner) for _ in range(repeats)]
        seconds[name] = float(np.median(runs))
        logger.debug(f"bench {name}: median {seconds[name]:.6f}s over {repeats} repeats")

    table = bench_table(seconds, singles)
    print(f"Selection time, pool of {len(pool)}, selecting {n} (median of {repeats})")
    print(table.to_string(index=False, formatters={"seconds": "{:.6f}".format, "delta_pct": "{:+.3f}%".format}))
    delta = table.loc[table["strategy"] == Strategy.AG.value, "delta_pct"].iloc[0]
    print(f"Delta_AG = {delta:.3f}%")

    if bench["write_csv"]:
        os.makedirs(config.output_dir, exist_ok=True)
        path = os.path.join(config.output_dir, BENCH_NAME)
        table.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
        logger.info(f"Bench table written to {path}")
    return table


def build_parser():
    parser = argparse.ArgumentParser(prog="sepal", description="Multi-label active learning experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment settings file (.json or .toml)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--log-level", help="console log level, e.g. INFO")

    sub.add_parser("generate", parents=[common], help="write a synthetic dataset to disk")
    run = sub.add_parser("run", parents=[common], help="run an active-learning experiment")
    run.add_argument("--jobs", type=int, help="worker processes for (strategy, trial) units")
    run.add_argument("--no-progress", action="store_true", help="hide progress bars")
    report = sub.add_parser("report", help="summarise a finished run directory")
    report.add_argument("run_dir")
    report.add_argument("--log-level", help="console log level, e.g. INFO")
    sub.add_parser("bench", parents=[common], help="time one selection pass per metric")
    return parser


def _overrides(args) -> dict:
    overrides = {"output_dir": getattr(args, "out", None), "seed": getattr(args, "seed", None),
                 "jobs": getattr(args, "jobs", None), "log_level": getattr(args, "log_level", None)}
    if getattr(args, "no_progress", False):
        overrides["progress"] = False
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    global_logger = GlobalLogger.get_instance()
    logger = global_logger.get_logger()
    if args.log_level:
        global_logger.set_console_level(args.log_level)

    try:
        if args.command == "report":
            cmd_report(args.run_dir)
            return EXIT_OK
        config = ExperimentConfig.load_config(args.config, _overrides(args))
        global_logger.set_console_level(config.settings["log_level"])
        if args.command == "generate":
            cmd_generate(config)
        elif args.command == "run":
            cmd_run(config)
        elif args.command == "bench":
            cmd_bench(config)
        return EXIT_OK
    except SepalError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        print(f"error: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
