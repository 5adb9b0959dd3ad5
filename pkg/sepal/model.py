# model.py
"""
Desk-scale weakly supervised scorer.

Every grid cell is mapped linearly to C*M raw scores, Wildcat heads average the M
maps per class, the spatial pooling head turns each class map into one logit and
a sigmoid gives the per-class confidence. Training is plain mini-batch SGD on the
per-class binary cross-entropy, with the pooling gradient routed through the
cells the forward pass selected.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .GlobalLogger import GlobalLogger
from .exceptions import ConfigurationError, UsageError
from .scoremap import PoolConfig, PoolResult, spatial_pool, spatial_pool_backward

EPS = 1e-7
DEFAULT_LR = 0.1
DEFAULT_BATCH_SIZE = 16


@dataclass(frozen=True)
class FeatureGrid:
    sample_id: str
    values: np.ndarray  # H x W x D

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ConfigurationError(f"FeatureGrid {self.sample_id} must be H x W x D, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigurationError(f"FeatureGrid {self.sample_id} holds non-finite features")
        object.__setattr__(self, "values", values)


@dataclass
class ScorerParams:
    weight: np.ndarray  # (C*M) x D
    bias: np.ndarray  # C*M
    pool: PoolConfig = field(default_factory=PoolConfig)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        m = self.pool.maps_per_class
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent")
        if self.weight.shape[0] % m != 0:
            raise ConfigurationError(
                f"{self.weight.shape[0]} score maps cannot be grouped into {m} maps per class")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ConfigurationError("Scorer parameters must be finite")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0] // self.pool.maps_per_class

    @property
    def n_features(self) -> int:
        return self.weight.shape[1]

    def copy(self):
        return ScorerParams(self.weight.copy(), self.bias.copy(), self.pool)


def init_params(n_classes: int, n_features: int, pool: PoolConfig, seed: int, scale: float = 0.01):
    """Small seeded Gaussian weights, zero bias."""
    if n_classes < 1 or n_features < 1:
        raise ConfigurationError(f"Need C >= 1 and D >= 1, got C={n_classes}, D={n_features}")
    rng = np.random.default_rng(seed)
    n_maps = n_classes * pool.maps_per_class
    return ScorerParams(rng.normal(0.0, scale, size=(n_maps, n_features)), np.zeros(n_maps), pool)


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    probs: np.ndarray
    separation: Optional[np.ndarray]
    scores: np.ndarray


@dataclass(frozen=True)
class PredictionBatch:
    """Predictions for a whole pool, one row per sample."""
    sample_ids: Tuple[str, ...]
    probs: np.ndarray  # N x C
    separation: Optional[np.ndarray]  # N x C
    scores: np.ndarray  # N x C

    def __len__(self):
        return len(self.sample_ids)

    def row(self, i: int) -> Prediction:
        sep = None if self.separation is None else self.separation[i]
        return Prediction(self.sample_ids[i], self.probs[i], sep, self.scores[i])

    @classmethod
    def stack(cls, predictions: Sequence[Prediction]):
        if not predictions:
            return cls((), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)))
        has_sep = all(p.separation is not None for p in predictions)
        return cls(
            tuple(p.sample_id for p in predictions),
            np.stack([p.probs for p in predictions]),
            np.stack([p.separation for p in predictions]) if has_sep else None,
            np.stack([p.scores for p in predictions]),
        )


PROB_FLOOR = np.nextafter(0.0, 1.0)
PROB_CEIL = np.nextafter(1.0, 0.0)


def sigmoid(z):
    """Logistic function kept strictly inside (0, 1) even for saturating logits."""
    return np.clip(np.exp(-np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))), PROB_FLOOR, PROB_CEIL)


def _check_features(params: ScorerParams, features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 4 or features.shape[-1] != params.n_features:
        raise ConfigurationError(
            f"Features of shape {features.shape} do not match a scorer expecting D={params.n_features}")
    return features


def _forward_maps(params: ScorerParams, features):
    """Return flattened class maps (N, C, H*W) and the cell features (N, H*W, D)."""
    n, h, w, d = features.shape
    cells = features.reshape(n, h * w, d)
    raw = cells @ params.weight.T + params.bias  # N x HW x CM
    m = params.pool.maps_per_class
    if m > 1:
        raw = raw.reshape(n, h * w, params.n_classes, m).mean(axis=-1)
    return np.ascontiguousarray(raw.transpose(0, 2, 1)), cells


def predict_batch(params: ScorerParams, features, sample_ids: Sequence[str]) -> PredictionBatch:
    features = _check_features(params, features)
    if len(sample_ids) != features.shape[0]:
        raise ConfigurationError(f"{len(sample_ids)} ids for {features.shape[0]} feature grids")
    maps, _ = _forward_maps(params, features)
    pooled = spatial_pool(maps, params.pool)
    return PredictionBatch(tuple(sample_ids), sigmoid(pooled.scores), pooled.separation, pooled.scores)


def forward(params: ScorerParams, x: FeatureGrid) -> Prediction:
    return predict_batch(params, x.values[None], [x.sample_id]).row(0)


def loss(pred: Prediction, labels) -> float:
    """Mean over classes of the clamped binary cross-entropy."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != pred.probs.shape:
        raise ConfigurationError(f"labels {labels.shape} do not match predictions {pred.probs.shape}")
    return float(_bce(pred.probs, labels).mean())


def _bce(probs, labels):
    p = np.clip(probs, EPS, 1.0 - EPS)
    return -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))


def loss_and_grad(params: ScorerParams, features, labels):
    """
    Batch-mean loss and its gradient w.r.t. weight and bias.
    :return: (loss, grad_weight, grad_bias)
    """
    features = _check_features(params, features)
    labels = np.asarray(labels, dtype=np.float64)
    n = features.shape[0]
    maps, cells = _forward_maps(params, features)
    pooled: PoolResult = spatial_pool(maps, params.pool)
    probs = sigmoid(pooled.scores)
    value = float(_bce(probs, labels).mean())

    # d(mean BCE)/d(logit); zero where the clamp is active
    inside = (probs > EPS) & (probs < 1.0 - EPS)
    d_scores = np.where(inside, probs - labels, 0.0) / (params.n_classes * n)

    d_maps = spatial_pool_backward(pooled, params.pool, d_scores, maps.shape[-1])  # N x C x HW
    d_raw = d_maps.transpose(0, 2, 1)  # N x HW x C
    m = params.pool.maps_per_class
    if m > 1:
        d_raw = np.repeat(d_raw / m, m, axis=-1)
    grad_weight = np.einsum("nkj,nkd->jd", d_raw, cells)
    grad_bias = d_raw.sum(axis=(0, 1))
    return value, grad_weight, grad_bias


def train(params: ScorerParams, features, labels, epochs: int, lr: float = DEFAULT_LR,
          seed: int = 0, batch_size: int = DEFAULT_BATCH_SIZE) -> ScorerParams:
    """
    Mini-batch SGD from ``params`` on a private copy.
    Samples are reshuffled each epoch by a permutation drawn from ``seed``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if features.shape[0] == 0:
        raise UsageError("Cannot train on an empty labeled set")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    logger = GlobalLogger.get_instance().get_logger()

    trained = params.copy()
    rng = np.random.default_rng(seed)
    n = features.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            value, g_w, g_b = loss_and_grad(trained, features[batch], labels[batch])
            trained.weight -= lr * g_w
            trained.bias -= lr * g_b
            epoch_loss += value * len(batch)
        logger.debug(f"epoch {epoch + 1}/{epochs}: loss {epoch_loss / n:.6f}")
    return trained


def sample_id_ranks(sample_ids: Sequence[str]) -> np.ndarray:
    """Position of every id in ascending id order, used as the tie-breaking key."""
    order = np.argsort(np.asarray(sample_ids, dtype=str), kind="stable")
    ranks = np.empty(len(order), dtype=np.int64)
    ranks[order] = np.arange(len(order))
    return ranks


def average_precision(scores, labels, sample_ids: Sequence[str]) -> float:
    """
    Precision at every positive hit, averaged over the positives.
    Ranking is by descending score; equal scores go by ascending sample id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UsageError("Average precision is undefined without positives")
    order = np.lexsort((sample_id_ranks(sample_ids), -scores))
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hit = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hit.mean())


@dataclass(frozen=True)
class MapResult:
    mean_ap: float
    per_class: Dict[int, float]
    excluded: List[int]


def evaluate_map(params: ScorerParams, features, labels, sample_ids: Sequence[str]) -> MapResult:
    """Mean AP over the eval set; classes without positives are excluded and reported."""
    labels = np.asarray(labels)
    if len(sample_ids) == 0:
        raise UsageError("Cannot evaluate mAP on an empty eval set")
    probs = predict_batch(params, features, sample_ids).probs
    per_class = {}
    excluded = []
    for j in range(labels.shape[1]):
        if labels[:, j].any():
            per_class[j] = average_precision(probs[:, j], labels[:, j], sample_ids)
        else:
            excluded.append(j)
    if not per_class:
        raise UsageError("No class has a positive in the eval set")
    if excluded:
        GlobalLogger.get_instance().get_logger().warning(
            f"mAP excludes classes without eval positives: {excluded}")
    return MapResult(float(np.mean(list(per_class.values()))), per_class, excluded)

