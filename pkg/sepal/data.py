# data.py
"""
Multi-label feature-grid datasets.

Synthetic data plants, for every class present in a sample, a rectangular blob of
cells shifted along that class's prototype direction on top of shared Gaussian
background noise. External datasets are read from a CSV manifest that points at
one ALCV1 tensor file per sample:

    magic  b"ALCV1"
    H, W, D  three little-endian uint32
    H*W*D  little-endian float32, row-major, cell-major over D
"""

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .GlobalLogger import GlobalLogger
from .exceptions import ConfigurationError, ValidationError
from .model import FeatureGrid

MAGIC = b"ALCV1"
HEADER = struct.Struct("<5sIII")
MANIFEST_COLUMNS = ["sample_id", "path", "labels", "split"]
MANIFEST_NAME = "manifest.csv"
CLASSES_NAME = "classes.txt"
FEATURE_DIR = "features"
TENSOR_SUFFIX = ".alcv"
SPLITS = ("train", "eval")


@dataclass
class Dataset:
    sample_ids: List[str]
    features: np.ndarray  # N x H x W x D, float32
    labels: np.ndarray  # N x C, uint8
    splits: List[str]
    class_names: List[str]
    params: Optional[Dict] = None  # generation parameters (synthetic only)
    masks: Optional[np.ndarray] = None  # N x C x H x W planted foreground (synthetic only)

    def __post_init__(self):
        self.sample_ids = [str(s) for s in self.sample_ids]
        self.splits = list(self.splits)
        self.class_names = list(self.class_names)
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self._index = {sid: i for i, sid in enumerate(self.sample_ids)}
        self.validate()

    def validate(self):
        n = len(self.sample_ids)
        if len(self._index) != n:
            raise ValidationError("Dataset sample ids are not unique")
        if n == 0:
            return
        if self.features.ndim != 4 or self.features.shape[0] != n:
            raise ValidationError(f"Expected {n} H x W x D grids, got features of shape {self.features.shape}")
        if self.labels.shape != (n, len(self.class_names)):
            raise ValidationError(
                f"Expected labels of shape {(n, len(self.class_names))}, got {self.labels.shape}")
        if len(self.splits) != n or not set(self.splits) <= set(SPLITS):
            raise ValidationError(f"Every sample needs a split tag in {SPLITS}")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("Dataset features must be finite")

    def __len__(self):
        return len(self.sample_ids)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        return tuple(self.features.shape[1:]) if len(self) else (0, 0, 0)

    def indices(self, sample_ids) -> np.ndarray:
        return np.asarray([self._index[s] for s in sample_ids], dtype=np.int64)

    def split_ids(self, split: str) -> List[str]:
        return [sid for sid, tag in zip(self.sample_ids, self.splits) if tag == split]

    def grid(self, sample_id: str) -> FeatureGrid:
        return FeatureGrid(sample_id, self.features[self._index[sample_id]])

    def label_counts(self, sample_ids) -> Dict[str, int]:
        rows = self.indices(sample_ids)
        return {sid: int(c) for sid, c in zip(sample_ids, self.labels[rows].sum(axis=1))}

    def classes_missing_in_eval(self) -> List[int]:
        rows = self.indices(self.split_ids("eval"))
        if len(rows) == 0:
            return list(range(self.n_classes))
        return [int(c) for c in np.flatnonzero(self.labels[rows].sum(axis=0) == 0)]


@dataclass(frozen=True)
class SyntheticParams:
    n_classes: int = 8
    n_features: int = 16
    height: int = 8
    width: int = 8
    n_train: int = 600
    n_eval: int = 200
    blob_size: Tuple[int, int] = (3, 4)  # inclusive range of blob side lengths
    signal: float = 4.0
    noise: float = 1.0
    labels_per_sample: Tuple[int, int] = (1, 4)  # inclusive range
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blob_size", tuple(int(v) for v in self.blob_size))
        object.__setattr__(self, "labels_per_sample", tuple(int(v) for v in self.labels_per_sample))
        for name in ("n_classes", "n_features", "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"dataset.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_train < 0 or self.n_eval < 0:
            raise ConfigurationError("dataset.n_train and dataset.n_eval must be >= 0")
        lo, hi = self.blob_size
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"dataset.blob_size must satisfy 1 <= min <= max, got {self.blob_size}")
        if hi > self.height or hi > self.width:
            raise ConfigurationError(
                f"dataset.blob_size max {hi} does not fit a {self.height}x{self.width} grid")
        lo, hi = self.labels_per_sample
        if not 1 <= lo <= hi:
            raise ConfigurationError(
                f"dataset.labels_per_sample must satisfy 1 <= min <= max, got {self.labels_per_sample}")
        if lo > self.n_classes:
            raise ConfigurationError(
                f"dataset.labels_per_sample min {lo} exceeds n_classes {self.n_classes}")
        if 0 < self.n_eval < self.n_classes:
            raise ConfigurationError(
                f"dataset.n_eval={self.n_eval} cannot give each of {self.n_classes} classes an eval positive")
        if self.signal < 0 or self.noise < 0:
            raise ConfigurationError("dataset.signal and dataset.noise must be >= 0")


def generate_synthetic(params: SyntheticParams) -> Dataset:
    """Pure function of ``params`` (seed included)."""
    rng = np.random.default_rng(params.seed)
    c, d, h, w = params.n_classes, params.n_features, params.height, params.width
    n = params.n_train + params.n_eval

    prototypes = rng.normal(size=(c, d))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    features = rng.normal(0.0, params.noise, size=(n, h, w, d))
    labels = np.zeros((n, c), dtype=np.uint8)
    masks = np.zeros((n, c, h, w), dtype=bool)

    lo, hi = params.labels_per_sample
    hi = min(hi, c)
    b_lo, b_hi = params.blob_size
    for i in range(n):
        k = int(rng.integers(lo, hi + 1))
        eval_pos = i - params.n_train
        if 0 <= eval_pos < c:
            # the first C eval samples each carry their own class so every class has an eval positive
            others = [j for j in range(c) if j != eval_pos]
            classes = [eval_pos] + list(rng.choice(others, size=k - 1, replace=False))
        else:
            classes = list(rng.choice(c, size=k, replace=False))
        for cls in sorted(int(j) for j in classes):
            bh = int(rng.integers(b_lo, b_hi + 1))
            bw = int(rng.integers(b_lo, b_hi + 1))
            top = int(rng.integers(0, h - bh + 1))
            left = int(rng.integers(0, w - bw + 1))
            features[i, top:top + bh, left:left + bw] += params.signal * prototypes[cls]
            masks[i, cls, top:top + bh, left:left + bw] = True
            labels[i, cls] = 1

    width = max(5, len(str(max(n - 1, 0))))
    return Dataset(
        sample_ids=[f"s{i:0{width}d}" for i in range(n)],
        features=features.astype(np.float32),
        labels=labels,
        splits=["train"] * params.n_train + ["eval"] * params.n_eval,
        class_names=[f"class_{j}" for j in range(c)],
        params=asdict(params),
        masks=masks,
    )


def write_tensor(path, grid):
    values = np.ascontiguousarray(np.asarray(grid, dtype="<f4"))
    if values.ndim != 3:
        raise ValidationError(f"{path}: ALCV1 tensors are H x W x D, got shape {values.shape}")
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, *values.shape))
        f.write(values.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER.size:
        raise ValidationError(f"{path}: truncated ALCV1 header")
    magic, h, w, d = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = h * w * d * 4
    payload = blob[HEADER.size:]
    if len(payload) != expected:
        raise ValidationError(f"{path}: expected {expected} payload bytes for {h}x{w}x{d}, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, d).astype(np.float32)


def save_dataset(dataset: Dataset, directory) -> str:
    """Write one ALCV1 file per sample, ``classes.txt`` and ``manifest.csv``; returns the manifest path."""
    feature_dir = os.path.join(directory, FEATURE_DIR)
    try:
        os.makedirs(feature_dir, exist_ok=True)
        rows = []
        for i, sid in enumerate(dataset.sample_ids):
            rel = f"{FEATURE_DIR}/{sid}{TENSOR_SUFFIX}"
            write_tensor(os.path.join(directory, rel), dataset.features[i])
            labels = ";".join(str(j) for j in np.flatnonzero(dataset.labels[i]))
            rows.append((sid, rel, labels, dataset.splits[i]))
        with open(os.path.join(directory, CLASSES_NAME), "w", encoding="utf-8", newline="\n") as f:
            f.writelines(f"{name}\n" for name in dataset.class_names)
        manifest_path = os.path.join(directory, MANIFEST_NAME)
        pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(
            manifest_path, index=False, encoding="utf-8", lineterminator="\n")
    except OSError as e:
        raise OSError(f"Could not write dataset to {directory}: {e}") from e
    GlobalLogger.get_instance().get_logger().info(
        f"Saved {len(dataset)} samples to {manifest_path}")
    return manifest_path


def _parse_labels(text: str, row: int):
    """Return ('mask', [bits]) or ('index', [class indices])."""
    text = text.strip()
    if text.startswith("b"):
        bits = text[1:]
        if not bits or set(bits) - {"0", "1"}:
            raise ValidationError(f"row {row}: bitmask labels must be 'b' followed by 0/1 digits, got {text!r}")
        return "mask", [int(ch) for ch in bits]
    if not text:
        return "index", []
    try:
        indices = [int(tok) for tok in text.split(";")]
    except ValueError as e:
        raise ValidationError(f"row {row}: bad label list {text!r}") from e
    if any(j < 0 for j in indices):
        raise ValidationError(f"row {row}: negative class index in {text!r}")
    return "index", indices


def load_manifest(path, max_workers: int = 1) -> Dataset:
    """
    Load a manifest and its tensor files. Samples come back sorted by sample id.
    """
    logger = GlobalLogger.get_instance().get_logger()
    if not os.path.isfile(path):
        raise ValidationError(f"Manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ValidationError(f"{path}: cannot parse manifest: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise ValidationError(f"{path}: manifest has no header") from e
    if list(frame.columns) != MANIFEST_COLUMNS:
        raise ValidationError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {','.join(frame.columns)}")

    classes_path = os.path.join(base, CLASSES_NAME)
    class_names = None
    if os.path.isfile(classes_path):
        with open(classes_path, encoding="utf-8") as f:
            class_names = [line.rstrip("\n") for line in f if line.rstrip("\n")]

    parsed = []
    seen = set()
    for i, record in enumerate(frame.itertuples(index=False), start=1):
        if not record.sample_id:
            raise ValidationError(f"row {i}: empty sample_id")
        if record.sample_id in seen:
            raise ValidationError(f"row {i}: duplicate sample_id {record.sample_id!r}")
        seen.add(record.sample_id)
        if record.split not in SPLITS:
            raise ValidationError(f"row {i}: split must be one of {SPLITS}, got {record.split!r}")
        tensor_path = os.path.join(base, record.path)
        if not os.path.isfile(tensor_path):
            raise ValidationError(f"row {i}: feature file not found: {tensor_path}")
        parsed.append((i, record.sample_id, tensor_path, _parse_labels(record.labels, i), record.split))

    if not parsed:
        logger.warning(f"Manifest {path} lists no samples")
        return Dataset([], np.zeros((0, 0, 0, 0)), np.zeros((0, len(class_names or []))), [],
                       class_names or [])

    if class_names is not None:
        n_classes = len(class_names)
    else:
        masks = [len(lab) for _, _, _, (kind, lab), _ in parsed if kind == "mask"]
        indices = [max(lab) + 1 for _, _, _, (kind, lab), _ in parsed if kind == "index" and lab]
        n_classes = masks[0] if masks else max(indices, default=0)
        class_names = [f"class_{j}" for j in range(n_classes)]

    labels = np.zeros((len(parsed), n_classes), dtype=np.uint8)
    for k, (row, sid, _, (kind, values), _) in enumerate(parsed):
        if kind == "mask":
            if len(values) != n_classes:
                raise ValidationError(f"row {row}: label length {len(values)} != number of classes {n_classes}")
            labels[k] = values
        else:
            if any(j >= n_classes for j in values):
                raise ValidationError(f"row {row}: class index out of range for {n_classes} classes")
            labels[k, values] = 1

    def load(item):
        row, _, tensor_path, _, _ = item
        try:
            return read_tensor(tensor_path)
        except ValidationError as e:
            raise ValidationError(f"row {row}: {e}") from e

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        grids = list(pool.map(load, parsed))
    shape = grids[0].shape
    for (row, _, tensor_path, _, _), grid in zip(parsed, grids):
        if grid.shape != shape:
            raise ValidationError(f"row {row}: grid shape {grid.shape} differs from {shape} ({tensor_path})")

    order = sorted(range(len(parsed)), key=lambda k: parsed[k][1])
    dataset = Dataset(
        sample_ids=[parsed[k][1] for k in order],
        features=np.stack([grids[k] for k in order]),
        labels=labels[order],
        splits=[parsed[k][4] for k in order],
        class_names=class_names,
    )
    missing = dataset.classes_missing_in_eval()
    if missing:
        logger.warning(f"Classes without an eval positive in {path}: {missing}")
    logger.info(f"Loaded {len(dataset)} samples from {path}")
    return dataset
