# harness.py
"""
Simulated active-learning loop: seed a labeled set, train a baseline, then per
iteration score the unlabeled pool once, select a batch with the configured
strategy, reveal its labels from the oracle, retrain and evaluate.
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .GlobalLogger import GlobalLogger
from .aggregate import (DEFAULT_AG_METRICS, SelectionRequest, SelectionResult, adversarial_select,
                        metric_agnostic, vote_select)
from .data import Dataset
from .exceptions import ConfigurationError
from .metrics import MetricId, random_ranking, rank
from .model import (DEFAULT_BATCH_SIZE, DEFAULT_LR, ScorerParams, evaluate_map, init_params,
                    predict_batch, train)
from .scoremap import PoolConfig

CURVE_COLUMNS = ["strategy", "iteration", "labeled_count", "mean_relative_map", "stddev"]

# Seed purposes mixed with the trial seed
SEED_INITIAL_SET = 1
SEED_INIT_PARAMS = 2
SEED_TRAIN = 3
SEED_SELECT = 4
SEED_REFERENCE = 5


class Strategy(str, Enum):
    UNC = "UNC"
    ENT = "ENT"
    MM = "MM"
    SEPSUM = "SEPSUM"
    SEPMAX = "SEPMAX"
    SEPMIN = "SEPMIN"
    R = "R"
    AG = "AG"
    VOTE = "VOTE"
    ADV = "ADV"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).upper()
        if key == "RANDOM":
            return cls.R
        try:
            return cls(key)
        except ValueError as e:
            raise ConfigurationError(f"Unknown strategy: {name}") from e

    @property
    def is_single_metric(self) -> bool:
        return self.value in {m.value for m in MetricId} and self is not Strategy.R


DEFAULT_STRATEGIES = ("UNC", "ENT", "MM", "SEPMAX", "SEPMIN", "SEPSUM", "AG", "R")

# Baseline plus the first three iterations train longer than the remaining ones
LONG_EPOCHS = 35
SHORT_EPOCHS = 25
LONG_ROUNDS = 4

SCHEDULE_PRESETS = {
    "voc2007": (100, (100, 100, 100, 100, 500)),
    "voc2012": (95, (95, 95, 95, 95, 95, 570)),
    "coco": (1640, (1640, 1640, 1640, 1640, 8200)),
    "synthetic": (60, (60, 60, 60, 60, 300)),
}


def default_epochs(n_iterations: int, scale: float = 1.0) -> Tuple[int, ...]:
    template = [LONG_EPOCHS if i < LONG_ROUNDS else SHORT_EPOCHS for i in range(n_iterations + 1)]
    return tuple(max(1, int(round(e * scale))) for e in template)


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class Schedule:
    initial_size: int
    adds: Tuple[int, ...]
    epochs: Tuple[int, ...]  # baseline first, then one entry per iteration
    trials: int = 1
    trial_seeds: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "adds", tuple(int(a) for a in self.adds))
        object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))
        object.__setattr__(self, "trial_seeds", tuple(int(s) for s in self.trial_seeds))
        if self.initial_size < 1:
            raise ConfigurationError(f"schedule.initial_size must be >= 1, got {self.initial_size}")
        if any(a < 1 for a in self.adds):
            raise ConfigurationError(f"schedule.adds must all be positive, got {list(self.adds)}")
        if len(self.epochs) != len(self.adds) + 1:
            raise ConfigurationError(
                f"schedule.epochs needs {len(self.adds) + 1} entries (baseline + iterations), got {len(self.epochs)}")
        if any(e < 0 for e in self.epochs):
            raise ConfigurationError("schedule.epochs must be >= 0")
        if self.trials < 1:
            raise ConfigurationError(f"schedule.trials must be >= 1, got {self.trials}")
        if self.trial_seeds and len(self.trial_seeds) != self.trials:
            raise ConfigurationError(f"schedule.trial_seeds needs {self.trials} entries")

    @classmethod
    def from_preset(cls, name: str, trials: int = 1, epoch_scale: float = 1.0, trial_seeds=()):
        if name not in SCHEDULE_PRESETS:
            raise ConfigurationError(f"Unknown schedule preset {name!r}; known: {sorted(SCHEDULE_PRESETS)}")
        initial, adds = SCHEDULE_PRESETS[name]
        return cls(initial, adds, default_epochs(len(adds), epoch_scale), trials, tuple(trial_seeds))

    @property
    def final_size(self) -> int:
        return self.initial_size + sum(self.adds)

    def check_feasible(self, train_size: int):
        if self.final_size > train_size:
            raise ConfigurationError(
                f"Schedule needs {self.final_size} labeled samples but the train split has {train_size}")

    def seeds_for(self, global_seed: int) -> Tuple[int, ...]:
        if self.trial_seeds:
            return self.trial_seeds
        return tuple(derive_seed(global_seed, trial) for trial in range(self.trials))


@dataclass(frozen=True)
class LearnerSettings:
    pool: PoolConfig = field(default_factory=PoolConfig)
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH_SIZE
    init_scale: float = 0.01
    warm_start: bool = False
    entropy_variant: str = "sum"
    ag_metrics: Tuple[MetricId, ...] = DEFAULT_AG_METRICS
    reference_epochs: Optional[int] = None


@dataclass
class IterationRecord:
    iteration: int
    labeled_count: int
    selected: List[str]
    training_seed: int
    epochs: int
    map: float
    relative_map: Optional[float] = None
    metric_values: Dict[str, List[float]] = field(default_factory=dict)
    contributions: Dict[str, int] = field(default_factory=dict)
    vote_histogram: Dict[int, int] = field(default_factory=dict)
    selection_seconds: float = 0.0
    warnings: List[str] = field(default_factory=list)


@dataclass
class RunRecord:
    strategy: str
    trial: int
    trial_seed: int
    config_hash: str
    iterations: List[IterationRecord] = field(default_factory=list)
    reference_map: Optional[float] = None
    slot: int = 0  # position of the strategy in the experiment's list

    def apply_reference(self, reference_map: float):
        self.reference_map = reference_map
        for it in self.iterations:
            it.relative_map = 100.0 * it.map / reference_map

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict):
        data = dict(data)
        iterations = []
        for it in data.pop("iterations", []):
            it = dict(it)
            it["vote_histogram"] = {int(k): v for k, v in it.get("vote_histogram", {}).items()}
            iterations.append(IterationRecord(**it))
        return cls(iterations=iterations, **data)


def _metric_list(strategy: Strategy, learner: LearnerSettings) -> Tuple[MetricId, ...]:
    if strategy.is_single_metric:
        return (MetricId.parse(strategy.value),)
    if strategy in (Strategy.AG, Strategy.VOTE):
        return tuple(learner.ag_metrics)
    return ()


def select(strategy, pool_ids: Sequence[str], params: ScorerParams, dataset: Dataset, n: int,
           seed: int, learner: LearnerSettings) -> Tuple[SelectionResult, Dict[str, List[float]]]:
    """
    Pick ``n`` samples from ``pool_ids``. Model strategies score the pool in a single
    forward pass shared by every metric they need. Only ADV reads oracle labels.
    :return: the selection and, per metric, its values for the chosen samples
    """
    strategy = Strategy.parse(strategy)
    pool_ids = list(pool_ids)

    if strategy is Strategy.R:
        ranking = random_ranking(pool_ids, seed)
        return SelectionResult(list(ranking.sample_ids[:n]), {"R": min(n, len(ranking))}), {}
    if strategy is Strategy.ADV:
        counts = dataset.label_counts(pool_ids)
        result = adversarial_select(counts, n)
        return result, {"ADV": [float(counts[sid]) for sid in result.sample_ids]}

    predictions = predict_batch(params, dataset.features[dataset.indices(pool_ids)], pool_ids)
    metric_ids = _metric_list(strategy, learner)
    rankings = [rank(predictions, m, seed, learner.entropy_variant) for m in metric_ids]

    if strategy is Strategy.AG:
        result = metric_agnostic(SelectionRequest(tuple(rankings), n))
    elif strategy is Strategy.VOTE:
        result = vote_select(rankings, n)
    else:
        chosen = list(rankings[0].sample_ids[:n])
        result = SelectionResult(chosen, {metric_ids[0].value: len(chosen)})

    values = {}
    for m, ranking in zip(metric_ids, rankings):
        lookup = dict(zip(ranking.sample_ids, ranking.values))
        values[m.value] = [float(lookup[sid]) for sid in result.sample_ids]
    return result, values


def time_selection(strategy, pool_ids: Sequence[str], params: ScorerParams, dataset: Dataset, n: int,
                   seed: int, learner: LearnerSettings) -> float:
    """Wall-clock seconds of one selection pass, pool scoring included."""
    start = time.perf_counter()
    select(strategy, pool_ids, params, dataset, n, seed, learner)
    return time.perf_counter() - start


def _fit(init: ScorerParams, dataset: Dataset, ids: Sequence[str], epochs: int, seed: int,
         learner: LearnerSettings) -> ScorerParams:
    rows = dataset.indices(sorted(ids))
    return train(init, dataset.features[rows], dataset.labels[rows], epochs, learner.lr, seed,
                 learner.batch_size)


def _evaluate(params: ScorerParams, dataset: Dataset) -> float:
    eval_ids = dataset.split_ids("eval")
    rows = dataset.indices(eval_ids)
    return evaluate_map(params, dataset.features[rows], dataset.labels[rows], eval_ids).mean_ap


def initial_params(dataset: Dataset, trial_seed: int, learner: LearnerSettings) -> ScorerParams:
    _, _, d = dataset.grid_shape
    return init_params(dataset.n_classes, d, learner.pool, derive_seed(trial_seed, SEED_INIT_PARAMS),
                       learner.init_scale)


def initial_labeled_set(dataset: Dataset, size: int, trial_seed: int) -> List[str]:
    train_ids = sorted(dataset.split_ids("train"))
    rng = np.random.default_rng(derive_seed(trial_seed, SEED_INITIAL_SET))
    picked = rng.choice(len(train_ids), size=min(size, len(train_ids)), replace=False)
    return sorted(train_ids[i] for i in picked)


def train_baseline(dataset: Dataset, schedule: Schedule, trial_seed: int, learner: LearnerSettings):
    """Train the shared baseline of a trial; returns (labeled ids, init params, trained params)."""
    labeled = initial_labeled_set(dataset, schedule.initial_size, trial_seed)
    init = initial_params(dataset, trial_seed, learner)
    params = _fit(init, dataset, labeled, schedule.epochs[0], derive_seed(trial_seed, SEED_TRAIN, 0), learner)
    return labeled, init, params


def reference_map(dataset: Dataset, schedule: Schedule, trial_seed: int, learner: LearnerSettings) -> float:
    """mAP of a model trained on the entire train split with this trial's seeds."""
    epochs = learner.reference_epochs if learner.reference_epochs is not None else schedule.epochs[0]
    init = initial_params(dataset, trial_seed, learner)
    params = _fit(init, dataset, dataset.split_ids("train"), epochs,
                  derive_seed(trial_seed, SEED_REFERENCE), learner)
    value = _evaluate(params, dataset)
    GlobalLogger.get_instance().get_logger().info(f"Reference mAP for trial seed {trial_seed}: {value:.4f}")
    return value


def run_trial(dataset: Dataset, schedule: Schedule, strategy, trial_seed: int,
              learner: LearnerSettings = LearnerSettings(), trial: int = 0, config_hash: str = "",
              reference: Optional[float] = None) -> RunRecord:
    logger = GlobalLogger.get_instance().get_logger()
    strategy = Strategy.parse(strategy)
    record = RunRecord(strategy.value, trial, trial_seed, config_hash)

    labeled, init, params = train_baseline(dataset, schedule, trial_seed, learner)
    warnings = []
    if len(labeled) < schedule.initial_size:
        warnings.append(f"initial set truncated to {len(labeled)} of {schedule.initial_size}")
        logger.warning(warnings[-1])
    record.iterations.append(IterationRecord(
        iteration=0, labeled_count=len(labeled), selected=[],
        training_seed=derive_seed(trial_seed, SEED_TRAIN, 0), epochs=schedule.epochs[0],
        map=_evaluate(params, dataset), warnings=warnings))

    labeled_set = set(labeled)
    train_ids = sorted(dataset.split_ids("train"))
    for iteration, budget in enumerate(schedule.adds, start=1):
        warnings = []
        pool = [sid for sid in train_ids if sid not in labeled_set]
        n = min(budget, len(pool))
        if n < budget:
            warnings.append(f"iteration {iteration}: budget {budget} truncated to {n} (pool exhausted)")
            logger.warning(f"{strategy.value} trial {trial}: {warnings[-1]}")

        values, contributions, histogram, chosen, seconds = {}, {}, {}, [], 0.0
        if n > 0:
            start = time.perf_counter()
            result, values = select(strategy, pool, params, dataset, n,
                                    derive_seed(trial_seed, SEED_SELECT, iteration), learner)
            seconds = time.perf_counter() - start
            chosen = result.sample_ids
            contributions, histogram = result.contributions, result.vote_histogram
        labeled_set.update(chosen)

        train_seed = derive_seed(trial_seed, SEED_TRAIN, iteration)
        start_params = params if learner.warm_start else init
        params = _fit(start_params, dataset, labeled_set, schedule.epochs[iteration], train_seed, learner)
        record.iterations.append(IterationRecord(
            iteration=iteration, labeled_count=len(labeled_set), selected=list(chosen),
            training_seed=train_seed, epochs=schedule.epochs[iteration], map=_evaluate(params, dataset),
            metric_values=values, contributions=contributions, vote_histogram=histogram,
            selection_seconds=seconds, warnings=warnings))
        logger.debug(f"{strategy.value} trial {trial} iteration {iteration}: "
                     f"{len(labeled_set)} labeled, mAP {record.iterations[-1].map:.4f}")

    if reference is not None:
        record.apply_reference(reference)
    return record


@dataclass
class ExperimentReport:
    records: List[RunRecord]
    curves: pd.DataFrame
    references: Dict[int, float]


def _reference_unit(args):
    dataset, schedule, trial_seed, learner = args
    return reference_map(dataset, schedule, trial_seed, learner)


def _trial_unit(args):
    dataset, schedule, slot, strategy, trial, trial_seed, learner, config_hash = args
    record = run_trial(dataset, schedule, strategy, trial_seed, learner, trial, config_hash)
    record.slot = slot
    return record


def _worker_init():
    # the parent owns experiment.log and the console
    global_logger = GlobalLogger.get_instance()
    global_logger.detach_run_directory()
    global_logger.set_console_level(logging.CRITICAL + 1)


def _collecting_call(job):
    fn, unit = job
    with GlobalLogger.get_instance().collect_warnings() as warnings:
        result = fn(unit)
    return result, warnings


def _map_units(fn, units, jobs: int, progress: bool, desc: str):
    """
    Apply ``fn`` to every unit in order. With several jobs, warnings raised in the
    workers are re-logged by this process, unit by unit.
    """
    if jobs <= 1:
        return [fn(u) for u in tqdm(units, desc=desc, disable=not progress)]
    logger = GlobalLogger.get_instance().get_logger()
    results = []
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init) as executor:
        outcomes = executor.map(_collecting_call, [(fn, u) for u in units])
        for result, warnings in tqdm(outcomes, total=len(units), desc=desc, disable=not progress):
            for level, message in warnings:
                logger.log(level, message)
            results.append(result)
    return results


def run_experiment(dataset: Dataset, schedule: Schedule, strategies: Sequence[str],
                   learner: LearnerSettings = LearnerSettings(), global_seed: int = 0,
                   config_hash: str = "", jobs: int = 1, progress: bool = False) -> ExperimentReport:
    """
    Run every (strategy, trial) pair. Initial sets and training seeds depend only on
    the trial, so strategies within a trial share their baseline. Results do not
    depend on ``jobs``.
    """
    logger = GlobalLogger.get_instance().get_logger()
    strategies = [Strategy.parse(s) for s in strategies]
    if not strategies:
        raise ConfigurationError("At least one strategy is required")
    seeds = schedule.seeds_for(global_seed)
    logger.info(f"Running {len(strategies)} strategies x {len(seeds)} trials")

    refs = _map_units(_reference_unit, [(dataset, schedule, s, learner) for s in seeds],
                      jobs, progress, "reference")
    units = [(dataset, schedule, slot, strategy.value, trial, seed, learner, config_hash)
             for trial, seed in enumerate(seeds)
             for slot, strategy in enumerate(strategies)]
    records = _map_units(_trial_unit, units, jobs, progress, "trials")
    for record in records:
        record.apply_reference(refs[record.trial])

    records.sort(key=lambda r: (r.slot, r.trial))
    return ExperimentReport(records, aggregate_curves(records), dict(enumerate(refs)))


def curve_label(strategy: str, seen: Dict[str, int]) -> str:
    seen[strategy] = seen.get(strategy, 0) + 1
    return strategy if seen[strategy] == 1 else f"{strategy}#{seen[strategy]}"


def aggregate_curves(records: Sequence[RunRecord]) -> pd.DataFrame:
    """
    Mean and population stddev of relative mAP per strategy slot and iteration.
    A strategy listed more than once gets one block per slot, labelled R, R#2, ...
    """
    groups: Dict[Tuple[int, str], List[RunRecord]] = {}
    for record in records:
        groups.setdefault((record.slot, record.strategy), []).append(record)

    rows = []
    seen: Dict[str, int] = {}
    for (slot, strategy), group in sorted(groups.items()):
        label = curve_label(strategy, seen)
        n_iter = min(len(r.iterations) for r in group)
        for i in range(n_iter):
            values = np.asarray([r.iterations[i].relative_map for r in group], dtype=np.float64)
            rows.append((label, i, group[0].iterations[i].labeled_count,
                         float(values.mean()), float(values.std())))
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def write_records(records: Sequence[RunRecord], path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def read_records(path) -> List[RunRecord]:
    with open(path, encoding="utf-8") as f:
        return [RunRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def write_curves(curves: pd.DataFrame, path):
    curves.to_csv(path, index=False, float_format="%.6f", encoding="utf-8", lineterminator="\n")
