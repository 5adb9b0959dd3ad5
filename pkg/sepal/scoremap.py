# scoremap.py
"""
Score maps and the two weakly supervised spatial pooling heads.

A class map is an H x W grid of raw scores. Weldon pooling averages the mean of
the k_top largest cells with the mean of the k_bot smallest cells; Wildcat first
averages M modality maps per class and then adds alpha times the bottom mean to
the top mean. Both report a per-class foreground/background separation.

Ties between equal cells are broken by the lowest row-major index, for the
largest and for the smallest selection alike, so forward and backward passes
see the same cells.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .exceptions import ConfigurationError, UsageError


class PoolMode(str, Enum):
    WELDON = "weldon"
    WILDCAT = "wildcat"


class SeparationMode(str, Enum):
    EXTREME = "extreme"  # max cell - min cell
    POOLED = "pooled"  # mean of top cells - mean of bottom cells


def default_k(n_cells: int) -> int:
    return max(1, int(round(0.1 * n_cells)))


@dataclass(frozen=True)
class PoolConfig:
    """
    Pooling hyperparameters.

    :param k_top: number of top instances, ``None`` picks ``default_k``
    :param k_bot: number of bottom instances, ``None`` picks ``default_k``
    :param alpha: weight of the bottom mean in Wildcat mode, in [0, 1]
    :param maps_per_class: modality maps per class (Wildcat only)
    :param allow_overlap: let k_top and k_bot each reach H*W instead of bounding their sum
    """
    k_top: Optional[int] = None
    k_bot: Optional[int] = None
    alpha: float = 1.0
    mode: PoolMode = PoolMode.WELDON
    maps_per_class: int = 1
    separation: SeparationMode = SeparationMode.EXTREME
    allow_overlap: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", PoolMode(self.mode))
            object.__setattr__(self, "separation", SeparationMode(self.separation))
        except ValueError as e:
            raise ConfigurationError(f"Invalid pooling setting: {e}") from e
        if not 0.0 <= float(self.alpha) <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if int(self.maps_per_class) < 1:
            raise ConfigurationError(f"maps_per_class must be >= 1, got {self.maps_per_class}")
        if self.mode is PoolMode.WELDON and self.maps_per_class != 1:
            raise ConfigurationError("maps_per_class applies to Wildcat pooling only; use 1 with Weldon")
        for name in ("k_top", "k_bot"):
            value = getattr(self, name)
            if value is not None and int(value) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")

    def resolve(self, n_cells: int) -> Tuple[int, int]:
        """Return the concrete (k_top, k_bot) for a grid with ``n_cells`` cells."""
        if n_cells < 1:
            raise ConfigurationError(f"Score map must have at least one cell, got {n_cells}")
        k_top = default_k(n_cells) if self.k_top is None else int(self.k_top)
        k_bot = default_k(n_cells) if self.k_bot is None else int(self.k_bot)
        if self.allow_overlap:
            if k_top > n_cells or k_bot > n_cells:
                raise ConfigurationError(
                    f"k_top={k_top} and k_bot={k_bot} must each be <= H*W={n_cells}")
        elif k_top + k_bot > n_cells:
            raise ConfigurationError(f"k_top + k_bot = {k_top + k_bot} exceeds H*W = {n_cells}")
        return k_top, k_bot

    def instance_weights(self, k_top: int, k_bot: int) -> Tuple[float, float]:
        """Weight every selected top / bottom cell carries in the pooled score."""
        if self.mode is PoolMode.WELDON:
            return 1.0 / (2 * k_top), 1.0 / (2 * k_bot)
        return 1.0 / k_top, float(self.alpha) / k_bot


@dataclass(frozen=True)
class ScoreMap:
    sample_id: str
    values: np.ndarray  # C x H x W
    maps_per_class: int = 1

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ConfigurationError(f"ScoreMap values must be C x H x W, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigurationError(f"ScoreMap {self.sample_id} holds non-finite scores")
        object.__setattr__(self, "values", values)

    @property
    def classes(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_raw(cls, sample_id, raw, maps_per_class):
        """Build a class-level map from (C*M) x H x W Wildcat output."""
        return cls(sample_id, wildcat_class_pool(raw, maps_per_class), maps_per_class)


@dataclass(frozen=True)
class ClassSummary:
    class_score: float
    separation: float
    shape: Tuple[int, int]
    top_index: Optional[Tuple[int, ...]] = None
    bottom_index: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class PoolResult:
    """Vectorised pooling output over any leading batch axes."""
    scores: np.ndarray
    separation: np.ndarray
    top_index: np.ndarray
    bottom_index: np.ndarray
    k_top: int
    k_bot: int


def select_instances(flat, k_top, k_bot):
    """
    Indices of the k_top largest and k_bot smallest cells along the last axis.
    Stable sorts keep the lowest index first among equal values.
    """
    top = np.argsort(-flat, axis=-1, kind="stable")[..., :k_top]
    bottom = np.argsort(flat, axis=-1, kind="stable")[..., :k_bot]
    return top, bottom


def spatial_pool(flat, cfg: PoolConfig) -> PoolResult:
    """
    Pool flattened class maps.
    :param flat: array of shape (..., H*W)
    """
    flat = np.asarray(flat, dtype=np.float64)
    k_top, k_bot = cfg.resolve(flat.shape[-1])
    top, bottom = select_instances(flat, k_top, k_bot)
    top_mean = np.take_along_axis(flat, top, axis=-1).mean(axis=-1)
    bottom_mean = np.take_along_axis(flat, bottom, axis=-1).mean(axis=-1)

    if cfg.mode is PoolMode.WELDON:
        scores = (top_mean + bottom_mean) / 2
    else:
        scores = top_mean + cfg.alpha * bottom_mean

    if cfg.separation is SeparationMode.EXTREME:
        separation = flat.max(axis=-1) - flat.min(axis=-1)
    else:
        separation = top_mean - bottom_mean
    return PoolResult(scores, separation, top, bottom, k_top, k_bot)


def spatial_pool_backward(result: PoolResult, cfg: PoolConfig, upstream, n_cells):
    """Gradient of the pooled scores w.r.t. the flattened maps, shape (..., n_cells)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    w_top, w_bot = cfg.instance_weights(result.k_top, result.k_bot)
    batch_shape = result.top_index.shape[:-1]

    top_grad = np.zeros(batch_shape + (n_cells,))
    np.put_along_axis(top_grad, result.top_index, w_top, axis=-1)
    bottom_grad = np.zeros(batch_shape + (n_cells,))
    np.put_along_axis(bottom_grad, result.bottom_index, w_bot, axis=-1)
    return (top_grad + bottom_grad) * upstream[..., None]


def _check_map(values, cfg: PoolConfig, mode: PoolMode):
    if cfg.mode is not mode:
        raise ConfigurationError(f"{mode.value} pooling called with a {cfg.mode.value} PoolConfig")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ConfigurationError(f"Class map must be a non-empty H x W grid, got shape {values.shape}")
    return values


def _summarise(values, cfg: PoolConfig) -> ClassSummary:
    result = spatial_pool(values.reshape(-1), cfg)
    return ClassSummary(
        class_score=float(result.scores),
        separation=float(result.separation),
        shape=values.shape,
        top_index=tuple(int(i) for i in result.top_index),
        bottom_index=tuple(int(i) for i in result.bottom_index),
    )


def weldon_pool(class_map, cfg: PoolConfig) -> ClassSummary:
    """(mean of top cells + mean of bottom cells) / 2, plus the class separation."""
    return _summarise(_check_map(class_map, cfg, PoolMode.WELDON), cfg)


def wildcat_spatial_pool(class_map, cfg: PoolConfig) -> ClassSummary:
    """mean of top cells + alpha * mean of bottom cells, plus the class separation."""
    return _summarise(_check_map(class_map, cfg, PoolMode.WILDCAT), cfg)


def wildcat_class_pool(raw, maps_per_class):
    """
    Average each class's M modality maps cell-wise.
    :param raw: array of shape (C*M, H, W); maps of class c are rows c*M .. c*M+M-1
    :return: array of shape (C, H, W)
    """
    raw = np.asarray(raw, dtype=np.float64)
    m = int(maps_per_class)
    if m < 1 or raw.ndim != 3 or raw.shape[0] % m != 0:
        raise ConfigurationError(
            f"Raw map stack of shape {raw.shape} cannot be split into groups of {maps_per_class}")
    c = raw.shape[0] // m
    return raw.reshape(c, m, raw.shape[1], raw.shape[2]).mean(axis=1)


def pool_backward(summary: ClassSummary, cfg: PoolConfig, upstream_grad: float):
    """
    Distribute ``upstream_grad`` over the cells a forward pass selected.
    :return: H x W gradient of the class score w.r.t. the class map
    """
    if summary.top_index is None or summary.bottom_index is None:
        raise UsageError("pool_backward needs the selected cells recorded by a forward pass")
    h, w = summary.shape
    result = PoolResult(
        scores=np.asarray(summary.class_score),
        separation=np.asarray(summary.separation),
        top_index=np.asarray(summary.top_index, dtype=np.int64),
        bottom_index=np.asarray(summary.bottom_index, dtype=np.int64),
        k_top=len(summary.top_index),
        k_bot=len(summary.bottom_index),
    )
    grad = spatial_pool_backward(result, cfg, np.asarray(upstream_grad, dtype=np.float64), h * w)
    return grad.reshape(h, w)
