# metrics.py
"""Query metrics over model predictions and the rankings they induce."""

from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple, Union

import numpy as np

from .exceptions import ConfigurationError, UnsupportedMetricError
from .model import EPS, Prediction, PredictionBatch, sample_id_ranks

PredictionLike = Union[Prediction, PredictionBatch]


class MetricId(str, Enum):
    UNC = "UNC"
    ENT = "ENT"
    MM = "MM"
    SEPSUM = "SEPSUM"
    SEPMAX = "SEPMAX"
    SEPMIN = "SEPMIN"
    RANDOM = "R"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).upper()
        if key == "RANDOM":
            return cls.RANDOM
        try:
            return cls(key)
        except ValueError as e:
            raise ConfigurationError(f"Unknown query metric: {name}") from e


class Direction(str, Enum):
    SELECT_MIN = "min"
    SELECT_MAX = "max"
    NONE = "n/a"


DIRECTIONS = {
    MetricId.UNC: Direction.SELECT_MIN,
    MetricId.ENT: Direction.SELECT_MAX,
    MetricId.MM: Direction.SELECT_MIN,
    MetricId.SEPSUM: Direction.SELECT_MIN,
    MetricId.SEPMAX: Direction.SELECT_MIN,
    MetricId.SEPMIN: Direction.SELECT_MIN,
    MetricId.RANDOM: Direction.NONE,
}

ENTROPY_VARIANTS = ("sum", "binary")
TIE_POLICY = "ascending sample_id"


class SepAggregation(str, Enum):
    SUM = "sum"
    MAX = "max"
    MIN = "min"


@dataclass(frozen=True)
class MetricScore:
    sample_id: str
    metric_id: MetricId
    value: float
    direction: Direction


@dataclass(frozen=True)
class Ranking:
    metric_id: MetricId
    sample_ids: Tuple[str, ...]  # best first
    values: Tuple[float, ...] = ()
    tie_policy: str = TIE_POLICY

    def __len__(self):
        return len(self.sample_ids)

    def head(self, n: int) -> "Ranking":
        return Ranking(self.metric_id, self.sample_ids[:n], self.values[:n], self.tie_policy)


def _finish(pred: PredictionLike, values):
    return float(values) if isinstance(pred, Prediction) else values


def unc(pred: PredictionLike):
    """Sum over classes of |p - 0.5|; smaller is more informative."""
    return _finish(pred, np.abs(np.asarray(pred.probs) - 0.5).sum(axis=-1))


def ent(pred: PredictionLike, variant: str = "sum"):
    """
    -sum_j p_j ln p_j over the sigmoid outputs, or the per-class binary entropy
    when ``variant`` is "binary". Confidences are clamped to [EPS, 1 - EPS].
    """
    p = np.clip(np.asarray(pred.probs, dtype=np.float64), EPS, 1.0 - EPS)
    terms = -p * np.log(p)
    if variant == "binary":
        terms = terms - (1.0 - p) * np.log(1.0 - p)
    elif variant != "sum":
        raise ConfigurationError(f"Unknown entropy variant {variant!r}; expected one of {ENTROPY_VARIANTS}")
    return _finish(pred, terms.sum(axis=-1))


def mm(pred: PredictionLike):
    return _finish(pred, np.asarray(pred.probs).max(axis=-1))


def sep(pred: PredictionLike, agg):
    if pred.separation is None:
        raise UnsupportedMetricError("Separation metrics need a model with a spatial pooling head")
    agg = SepAggregation(agg)
    values = np.asarray(pred.separation, dtype=np.float64)
    if agg is SepAggregation.SUM:
        out = values.sum(axis=-1)
    elif agg is SepAggregation.MAX:
        out = values.max(axis=-1)
    else:
        out = values.min(axis=-1)
    return _finish(pred, out)


def score(predictions: PredictionLike, metric_id, entropy_variant: str = "sum"):
    """Raw metric values for every sample (scalar for a single Prediction)."""
    metric_id = MetricId.parse(metric_id)
    if metric_id is MetricId.UNC:
        return unc(predictions)
    if metric_id is MetricId.ENT:
        return ent(predictions, entropy_variant)
    if metric_id is MetricId.MM:
        return mm(predictions)
    if metric_id is MetricId.SEPSUM:
        return sep(predictions, SepAggregation.SUM)
    if metric_id is MetricId.SEPMAX:
        return sep(predictions, SepAggregation.MAX)
    if metric_id is MetricId.SEPMIN:
        return sep(predictions, SepAggregation.MIN)
    raise UnsupportedMetricError("RANDOM has no per-sample value")


def metric_scores(predictions: PredictionBatch, metric_id, entropy_variant: str = "sum") -> List[MetricScore]:
    metric_id = MetricId.parse(metric_id)
    values = score(predictions, metric_id, entropy_variant)
    direction = DIRECTIONS[metric_id]
    return [MetricScore(sid, metric_id, float(v), direction)
            for sid, v in zip(predictions.sample_ids, values)]


def random_ranking(sample_ids, seed: int) -> Ranking:
    """Seeded uniform permutation of the pool, independent of the order ids arrive in."""
    ids = sorted(str(s) for s in sample_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    return Ranking(MetricId.RANDOM, tuple(ids[i] for i in order))


def rank(predictions: PredictionBatch, metric_id, seed: int = 0, entropy_variant: str = "sum") -> Ranking:
    """
    Order the pool best-first for ``metric_id``.
    Ties go to the lower sample id; RANDOM ignores the predictions and uses ``seed``.
    """
    metric_id = MetricId.parse(metric_id)
    if metric_id is MetricId.RANDOM:
        return random_ranking(predictions.sample_ids, seed)
    ids = np.asarray(predictions.sample_ids, dtype=str)
    if len(ids) == 0:
        return Ranking(metric_id, ())
    id_ranks = sample_id_ranks(ids)

    values = np.asarray(score(predictions, metric_id, entropy_variant), dtype=np.float64)
    key = -values if DIRECTIONS[metric_id] is Direction.SELECT_MAX else values
    order = np.lexsort((id_ranks, key))
    return Ranking(metric_id, tuple(ids[order].tolist()), tuple(values[order].tolist()))
