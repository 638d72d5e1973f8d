"""Datasets, client partitions, noise injection and data-quality references."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import SeededRng, normalize_to_simplex

CLEAN = 0
LABEL_NOISE = 1
FEATURE_NOISE = 2


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.X) == 0:
            raise DatasetError("empty dataset")
        if len(self.X) != len(self.y):
            raise DatasetError("features and labels differ in length")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise DatasetError("label outside [0, num_classes)")
        if not np.all(np.isfinite(self.X)):
            raise DatasetError("non-finite feature")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass(frozen=True)
class Partition:
    """Per-client datasets plus the source indices and noise flags of every sample."""

    clients: tuple[Dataset, ...]
    indices: tuple[np.ndarray, ...]
    flags: tuple[np.ndarray, ...]
    num_classes: int

    @property
    def n(self) -> int:
        return len(self.clients)

    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clients], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        """``(n, C)`` matrix of per-client label counts."""
        return np.stack([c.class_counts() for c in self.clients])

    def manifest(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "clients": [
                {"client": k, "indices": idx.tolist(), "flags": fl.tolist()}
                for k, (idx, fl) in enumerate(zip(self.indices, self.flags))
            ],
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1))


def generate_synthetic(num_classes: int, input_dim: int, per_class: int,
                       spread: float, rng: SeededRng, radius: float = 1.0) -> Dataset:
    """Gaussian blobs whose means lie on a sphere of the given radius."""
    if num_classes < 2 or input_dim < 2:
        raise DatasetError("need at least 2 classes and 2 input dimensions")
    means = rng.normal(size=(num_classes, input_dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
    y = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(size=(len(y), input_dim))
    X = means[y] + spread * noise
    order = rng.permutation(len(y))
    return Dataset(X[order], y[order], num_classes)


def load_csv_dataset(path) -> Dataset:
    """Rows of ``f1,...,fI,label``; the class count is ``max label + 1``."""
    rows_X, rows_y = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DatasetError(f"line {lineno}: expected features and a label")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DatasetError(f"line {lineno}: expected {width} columns, found {len(row)}")
            try:
                feats = [float(v) for v in row[:-1]]
            except ValueError as exc:
                raise DatasetError(f"line {lineno}: malformed feature ({exc})") from None
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise DatasetError(f"line {lineno}: label {row[-1]!r} is not an integer") from None
            if label < 0:
                raise DatasetError(f"line {lineno}: negative label")
            rows_X.append(feats)
            rows_y.append(label)
    if not rows_y:
        raise DatasetError(f"empty dataset: {path}")
    y = np.array(rows_y, dtype=np.int64)
    return Dataset(np.array(rows_X, dtype=np.float64), y, int(y.max()) + 1)


def train_test_split(ds: Dataset, test_fraction: float, rng: SeededRng) -> tuple[Dataset, Dataset]:
    order = rng.permutation(len(ds))
    n_test = int(math.floor(test_fraction * len(ds)))
    if n_test == 0 or n_test == len(ds):
        raise DatasetError("test fraction leaves an empty split")
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def _build(ds: Dataset, assignment: list[np.ndarray]) -> Partition:
    indices = tuple(np.sort(np.asarray(a, dtype=np.int64)) for a in assignment)
    return Partition(
        clients=tuple(ds.subset(idx) for idx in indices),
        indices=indices,
        flags=tuple(np.zeros(len(idx), dtype=np.uint8) for idx in indices),
        num_classes=ds.num_classes,
    )


def _repair_empty(assignment: list[list[int]]) -> None:
    while True:
        sizes = [len(a) for a in assignment]
        if min(sizes) > 0:
            return
        empty = sizes.index(0)
        largest = int(np.argmax(sizes))
        assignment[largest].sort()
        assignment[empty].append(assignment[largest].pop())


def partition_dirichlet(ds: Dataset, n: int, delta: float, rng: SeededRng) -> Partition:
    """Label-skewed split: each class is spread over clients by a Dirichlet(delta) draw."""
    if n < 1:
        raise DatasetError("need at least 1 client")
    if delta <= 0:
        raise DatasetError("Dirichlet coefficient must be positive")
    if len(ds) < n:
        raise DatasetError(f"dataset of {len(ds)} samples cannot cover {n} clients")
    assignment: list[list[int]] = [[] for _ in range(n)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(n, float(delta)))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            assignment[k].extend(part.tolist())
    _repair_empty(assignment)
    return _build(ds, [np.array(a) for a in assignment])


def partition_by_weights(ds: Dataset, weights, rng: SeededRng) -> Partition:
    """IID split with client volumes proportional to ``weights``."""
    w = normalize_to_simplex(weights)
    if len(ds) < len(w):
        raise DatasetError(f"dataset of {len(ds)} samples cannot cover {len(w)} clients")
    order = rng.permutation(len(ds))
    cuts = np.round(np.cumsum(w)[:-1] * len(ds)).astype(np.int64)
    assignment = [part.tolist() for part in np.split(order, cuts)]
    _repair_empty(assignment)
    return _build(ds, [np.array(a) for a in assignment])


def partition_iid(ds: Dataset, n: int, rng: SeededRng) -> Partition:
    return partition_by_weights(ds, np.ones(n), rng)


def _check_targets(part: Partition, client_ids) -> list[int]:
    ids = sorted(set(int(k) for k in client_ids))
    for k in ids:
        if not 0 <= k < part.n:
            raise DatasetError(f"unknown client id {k}")
    return ids


def inject_label_noise(part: Partition, client_ids, rate: float, rng: SeededRng) -> Partition:
    """Relabel floor(rate * |D_k|) samples of each targeted client to a random wrong class."""
    if not 0.0 <= rate <= 1.0:
        raise DatasetError("noise rate must be in [0, 1]")
    ids = _check_targets(part, client_ids)
    clients, flags = list(part.clients), list(part.flags)
    C = part.num_classes
    for k in ids:
        ds = clients[k]
        count = int(math.floor(rate * len(ds)))
        if count == 0:
            continue
        krng = rng.split(k)
        chosen = krng.permutation(len(ds))[:count]
        y = ds.y.copy()
        y[chosen] = (y[chosen] + krng.integers(1, C, size=count)) % C
        fl = flags[k].copy()
        fl[chosen] |= LABEL_NOISE
        clients[k] = Dataset(ds.X, y, C)
        flags[k] = fl
    return replace(part, clients=tuple(clients), flags=tuple(flags))


def inject_feature_noise(part: Partition, client_ids, sigma: float, rng: SeededRng) -> Partition:
    """Additive Gaussian noise of standard deviation sigma on every targeted sample."""
    if sigma < 0:
        raise DatasetError("sigma must be nonnegative")
    ids = _check_targets(part, client_ids)
    if sigma == 0.0:
        return part
    clients, flags = list(part.clients), list(part.flags)
    for k in ids:
        ds = clients[k]
        X = ds.X + sigma * rng.split(k).normal(size=ds.X.shape)
        clients[k] = Dataset(X, ds.y, ds.num_classes)
        flags[k] = flags[k] | FEATURE_NOISE
    return replace(part, clients=tuple(clients), flags=tuple(flags))


def quality_from_counts(class_counts, mode: str = "volume") -> np.ndarray:
    """Reference data-quality distribution from an ``(n, C)`` count matrix.

    ``volume`` weighs clients by sample count; ``class-diversity`` further
    multiplies by the fraction of classes the client owns.
    """
    counts = np.asarray(class_counts)
    volume = counts.sum(axis=1).astype(np.float64)
    if mode == "volume":
        return normalize_to_simplex(volume)
    if mode in ("class-diversity", "diversity"):
        owned = (counts > 0).sum(axis=1)
        return normalize_to_simplex(volume * owned / counts.shape[1])
    raise ValueError(f"unknown quality mode {mode!r}")


def quality_distribution(part: Partition, mode: str = "volume") -> np.ndarray:
    return quality_from_counts(part.class_counts(), mode)
