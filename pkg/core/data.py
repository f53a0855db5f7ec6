"""
Datasets, the stratified train/validation/test split, IID client
partitioning, a synthetic Gaussian-blob generator and a CSV loader.

Every operation is a pure function of its inputs and the seed. Each
consumer of randomness draws from its own stream,
np.random.default_rng([seed, stream]), so changing one step never shifts
another step's draws.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

from core.errors import DataError
from core.models import ClientShard, SplitSpec, floor_product

logger = logging.getLogger(__name__)

SPLIT_STREAM = 1
PARTITION_STREAM = 2
BLOBS_STREAM = 3

MAIZE_CLASSES: Tuple[str, ...] = ("common_rust", "gray_leaf_spot", "northern_leaf_blight", "healthy")
MAIZE_COUNTS: Tuple[int, ...] = (1192, 513, 985, 1162)


class Dataset(BaseModel):
    """Immutable features/labels pair with an ordered class list."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    labels: np.ndarray
    class_names: List[str] = Field(min_length=1)

    @field_validator("features", mode="before")
    @classmethod
    def coerce_features(cls, v: Any) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim < 2:
            raise ValueError("features must be [N, ...]")
        return v

    @field_validator("labels", mode="before")
    @classmethod
    def coerce_labels(cls, v: Any) -> np.ndarray:
        return np.asarray(v, dtype=np.int64).reshape(-1)

    @model_validator(mode="after")
    def validate_labels(self) -> Dataset:
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} samples"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError(f"labels must lie in [0, {len(self.class_names)})")
        return self

    @computed_field
    @property
    def num_samples(self) -> int:
        return int(self.labels.size)

    @computed_field
    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int]) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(features=self.features[idx], labels=self.labels[idx], class_names=self.class_names)

    def with_feature_shape(self, shape: Sequence[int]) -> Dataset:
        """Same samples, per-sample features reshaped (e.g. D=256 -> 1x16x16)."""
        shape = tuple(int(d) for d in shape)
        if shape == self.feature_shape:
            return self
        if int(np.prod(shape)) != int(np.prod(self.feature_shape)):
            raise DataError(f"cannot reshape features {self.feature_shape} to {shape}")
        features = self.features.reshape((self.num_samples,) + shape)
        return Dataset(features=features, labels=self.labels, class_names=self.class_names)


class SplitIndices(BaseModel):
    """Train/validation/test index sets, each sorted ascending."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def sizes(self) -> Dict[str, int]:
        return {"train": int(self.train.size), "val": int(self.val.size), "test": int(self.test.size)}


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer allocation of `total` proportional to `weights`; ties go to the lower index."""
    weights = np.asarray(weights, dtype=np.int64)
    denom = int(weights.sum())
    if denom == 0 or total == 0:
        return np.zeros_like(weights)
    exact = [total * int(w) for w in weights]
    base = np.array([e // denom for e in exact], dtype=np.int64)
    remainder = np.array([e % denom for e in exact], dtype=np.int64)
    short = total - int(base.sum())
    order = np.argsort(-remainder, kind="stable")
    base[order[:short]] += 1
    return base


def _fold_counts(
    n_val: int, n_test: int, counts: np.ndarray, class_names: Sequence[str], keep_train: bool
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-class validation and test counts, each fold apportioned over the
    class counts on its own.

    When a class's two folds would take its last training sample, its test
    count drops by one and the sample goes to a class whose test share was
    rounded down (any class with room if none was).
    """
    counts = np.asarray(counts, dtype=np.int64)
    val_counts = _largest_remainder(n_val, counts)
    test_counts = _largest_remainder(n_test, counts)
    room = counts - ((counts > 0) & keep_train).astype(np.int64)

    def _starved(c: int) -> DataError:
        return DataError(
            f"class {class_names[c]!r} has no training samples after stratification",
            {"class_count": int(counts[c])},
        )

    starved = np.flatnonzero(val_counts > room)
    if starved.size:
        raise _starved(int(starved[0]))

    over = np.flatnonzero(val_counts + test_counts > room)
    if over.size == 0:
        return val_counts, test_counts
    excess = int((val_counts + test_counts - room)[over].sum())
    test_counts[over] = room[over] - val_counts[over]

    denom = int(counts.sum())
    floors = np.array([n_test * int(w) // denom for w in counts], dtype=np.int64)
    remainders = np.array([n_test * int(w) % denom for w in counts], dtype=np.int64)
    order = np.argsort(-remainders, kind="stable")
    for rounded_down_only in (True, False):
        for c in order:
            while excess and val_counts[c] + test_counts[c] < room[c]:
                if rounded_down_only and test_counts[c] > floors[c]:
                    break
                test_counts[c] += 1
                excess -= 1
    if excess:
        raise _starved(int(over[0]))
    return val_counts, test_counts


def split(ds: Dataset, spec: Optional[SplitSpec] = None, seed: int = 0) -> SplitIndices:
    """
    Stratified split: |val| = floor(val_frac*N), |test| = floor(test_frac*N),
    train takes the rest.

    Each held-out fold is apportioned to classes by largest remainder, so a
    class keeps its share of every fold within one sample.

    Raises:
        DataError: fewer than 3 samples, or a class left without training samples.
    """
    spec = spec or SplitSpec()
    n = ds.num_samples
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")

    n_val = floor_product(spec.val_frac, n)
    n_test = floor_product(spec.test_frac, n)
    counts = ds.class_counts()
    val_counts, test_counts = _fold_counts(n_val, n_test, counts, ds.class_names, spec.train_frac > 0)

    rng = np.random.default_rng([seed, SPLIT_STREAM])
    train, val, test = [], [], []
    for c in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        v, t = int(val_counts[c]), int(test_counts[c])
        val.append(members[:v])
        test.append(members[v:v + t])
        train.append(members[v + t:])

    def _merge(parts: List[np.ndarray]) -> np.ndarray:
        return np.sort(np.concatenate(parts)).astype(np.int64) if parts else np.zeros(0, dtype=np.int64)

    result = SplitIndices(train=_merge(train), val=_merge(val), test=_merge(test))
    logger.debug("Split dataset", extra={"seed": seed, **result.sizes()})
    return result


def partition_iid(train_indices: Sequence[int], num_clients: int, seed: int = 0) -> List[ClientShard]:
    """
    Seeded shuffle, then round-robin: shard sizes differ by at most one.

    Shard k (0-based) belongs to client rank k + 1.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if num_clients < 1:
        raise DataError(f"need at least one client, got {num_clients}")
    if num_clients > train_indices.size:
        raise DataError(f"{num_clients} clients for {train_indices.size} training samples")
    rng = np.random.default_rng([seed, PARTITION_STREAM])
    shuffled = rng.permutation(train_indices)
    return [
        ClientShard(client_id=k + 1, indices=np.sort(shuffled[k::num_clients]))
        for k in range(num_clients)
    ]


def generate_blobs(
    num_classes: int = 4,
    counts: Optional[Sequence[int]] = None,
    dim: int = 16,
    separation: float = 10.0,
    seed: int = 0,
    class_names: Optional[Sequence[str]] = None,
    feature_shape: Optional[Sequence[int]] = None,
) -> Dataset:
    """
    Gaussian clusters with unit covariance, one mean per class.

    Means are separation * e_c when dim >= num_classes, otherwise
    separation times a random unit direction. Default counts mirror the
    maize leaf-disease class imbalance.
    """
    if separation <= 0:
        raise DataError(f"separation must be positive, got {separation}")
    if dim < 1:
        raise DataError(f"dim must be positive, got {dim}")
    if counts is None:
        counts = MAIZE_COUNTS if num_classes == len(MAIZE_COUNTS) else (100,) * num_classes
    counts = [int(c) for c in counts]
    if len(counts) != num_classes or any(c < 0 for c in counts):
        raise DataError(f"need {num_classes} non-negative class counts, got {counts}")
    if class_names is None:
        class_names = MAIZE_CLASSES if num_classes == len(MAIZE_CLASSES) else [f"class_{c}" for c in range(num_classes)]
    if len(class_names) != num_classes:
        raise DataError(f"{len(class_names)} class names for {num_classes} classes")

    rng = np.random.default_rng([seed, BLOBS_STREAM])
    if dim >= num_classes:
        means = np.eye(num_classes, dim) * separation
    else:
        directions = rng.standard_normal((num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = directions * separation

    labels = np.repeat(np.arange(num_classes), counts)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    ds = Dataset(features=features[order], labels=labels[order], class_names=list(class_names))
    if feature_shape is not None:
        ds = ds.with_feature_shape(feature_shape)
    return ds


def _parse_row(values: Sequence[str], lineno: int) -> List[float]:
    try:
        return [float(v) for v in values]
    except ValueError as e:
        raise DataError(f"line {lineno}: non-numeric value ({e})", {"line": lineno}) from e


def _is_header(row: Sequence[str]) -> bool:
    try:
        [float(v) for v in row[1:]]
    except ValueError:
        return True
    return False


def load_csv(path: Union[str, Path], class_names: Optional[Sequence[str]] = None) -> Dataset:
    """
    Load rows `label,v1,...,vD` (header optional).

    Labels map to contiguous indices in first-appearance order unless
    `class_names` fixes the order, in which case unknown labels are an error.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")

    fixed = list(class_names) if class_names is not None else None
    names: List[str] = list(fixed) if fixed is not None else []
    index: Dict[str, int] = {name: i for i, name in enumerate(names)}
    rows: List[List[float]] = []
    labels: List[int] = []
    width: Optional[int] = None

    with path.open(newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            row = [cell.strip() for cell in row]
            if not row or all(not cell for cell in row):
                continue
            if width is None and not rows and _is_header(row):
                continue
            if len(row) < 2:
                raise DataError(f"line {lineno}: expected a label and at least one value", {"line": lineno})
            label, values = row[0], row[1:]
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataError(
                    f"line {lineno}: ragged row with {len(values)} values, expected {width}",
                    {"line": lineno},
                )
            rows.append(_parse_row(values, lineno))
            if label not in index:
                if fixed is not None:
                    raise DataError(f"line {lineno}: unknown label {label!r}", {"line": lineno})
                index[label] = len(names)
                names.append(label)
            labels.append(index[label])

    if not rows:
        raise DataError(f"dataset file has no samples: {path}")
    logger.info(
        "Loaded CSV dataset",
        extra={"path": str(path), "samples": len(rows), "features": width, "classes": len(names)},
    )
    return Dataset(features=np.asarray(rows), labels=np.asarray(labels), class_names=names)


class PartitionPlan(BaseModel):
    """Split plus per-client shards, with everything a run manifest records."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    seed: int
    class_names: List[str]
    split: SplitIndices
    shards: List[ClientShard]

    def to_manifest(self, include_indices: bool = False) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "seed": self.seed,
            "class_names": list(self.class_names),
            "split_sizes": self.split.sizes(),
            "shards": [s.to_manifest(include_indices) for s in self.shards],
        }
        if include_indices:
            data["val_indices"] = self.split.val.tolist()
            data["test_indices"] = self.split.test.tolist()
        return data


def plan_partition(ds: Dataset, num_clients: int, spec: Optional[SplitSpec] = None, seed: int = 0) -> PartitionPlan:
    """split followed by partition_iid over the training indices."""
    indices = split(ds, spec, seed)
    shards = partition_iid(indices.train, num_clients, seed)
    return PartitionPlan(seed=seed, class_names=list(ds.class_names), split=indices, shards=shards)


__all__ = [
    "Dataset",
    "SplitIndices",
    "PartitionPlan",
    "split",
    "partition_iid",
    "generate_blobs",
    "load_csv",
    "plan_partition",
    "MAIZE_CLASSES",
    "MAIZE_COUNTS",
]
