"""Desk-scale datasets: synthetic blobs, CSV ingestion, client partitioning.

Partitioning assigns every sample to exactly one client, either by balanced
random split (iid) or by drawing per-class client proportions from a
Dirichlet distribution (label skew; smaller alpha = more skew). Data
plumbing uses numpy's PCG64 generator; only the training protocol itself
needs the replayable stream from ``prng``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PARTITION_SCHEMES = ("iid", "dirichlet")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ConfigError("dataset needs 2-d features and 1-d labels")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError("features and labels disagree on sample count")
        if self.features.shape[0] < 1:
            raise ConfigError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("labels outside [0, num_classes)")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("dataset features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    assignment: np.ndarray
    n_clients: int
    scheme: str

    def __post_init__(self):
        if self.assignment.min() < 0 or self.assignment.max() >= self.n_clients:
            raise ConfigError("assignment references unknown client ids")
        counts = np.bincount(self.assignment, minlength=self.n_clients)
        if counts.min() < 1:
            raise ConfigError("every client must receive at least one sample")

    def client_indices(self, client_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client_id)


def make_blobs(n: int, dim: int, num_classes: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters around class means drawn once from the seed.

    Class counts are balanced to within one sample; row order is shuffled so
    contiguous slices still mix classes.
    """
    if n < num_classes:
        raise ConfigError(f"need at least one sample per class ({n} < {num_classes})")
    if dim < 1 or num_classes < 1:
        raise ConfigError("dim and num_classes must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.normal(size=(num_classes, dim)) * 2.0
    labels = np.repeat(np.arange(num_classes), n // num_classes)
    labels = np.concatenate([labels, np.arange(n - labels.shape[0])])
    rng.shuffle(labels)
    features = centers[labels] + spread * rng.normal(size=(n, dim))
    return Dataset(features=features, labels=labels.astype(np.int64), num_classes=num_classes)


def standardize(dataset: Dataset) -> Dataset:
    """Zero-mean unit-variance features, computed on the full dataset."""
    mean = dataset.features.mean(axis=0)
    std = dataset.features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Dataset((dataset.features - mean) / std, dataset.labels, dataset.num_classes)


def load_csv(path, label_column: str) -> Dataset:
    """Comma-separated file with a header row; every non-label column numeric.

    Labels are re-indexed densely from 0 in sorted order of their distinct
    values; row order is preserved.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: file is empty") from None
        if label_column not in header:
            raise ConfigError(f"{path}: no column named {label_column!r} in header {header}")
        label_idx = header.index(label_column)
        rows = []
        raw_labels = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for i, v in enumerate(row) if i != label_idx])
            except ValueError as exc:
                raise ConfigError(f"{path}:{line_no}: non-numeric feature value ({exc})") from None
            raw_labels.append(row[label_idx])
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    classes = sorted(set(raw_labels))
    index = {c: i for i, c in enumerate(classes)}
    labels = np.array([index[v] for v in raw_labels], dtype=np.int64)
    return Dataset(np.array(rows, dtype=np.float64), labels, num_classes=len(classes))


def save_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    """Inverse of load_csv, feature columns named f0..f{dim-1}."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{i}" for i in range(dataset.dim)] + [label_column])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def partition(dataset: Dataset, n_clients: int, scheme: str, seed: int,
              alpha: float = 0.5) -> PartitionPlan:
    """Assign every sample to one client; deterministic in (inputs, seed)."""
    if scheme not in PARTITION_SCHEMES:
        raise ConfigError(f"unknown partition scheme {scheme!r}, expected one of {PARTITION_SCHEMES}")
    if not 1 <= n_clients <= dataset.n:
        raise ConfigError(f"cannot split {dataset.n} samples across {n_clients} clients")
    rng = np.random.Generator(np.random.PCG64(seed))
    if scheme == "iid":
        order = rng.permutation(dataset.n)
        assignment = np.empty(dataset.n, dtype=np.int64)
        sizes = np.full(n_clients, dataset.n // n_clients)
        sizes[: dataset.n % n_clients] += 1
        lo = 0
        for cid, size in enumerate(sizes):
            assignment[order[lo:lo + size]] = cid
            lo += size
        return PartitionPlan(assignment, n_clients, scheme)

    if alpha <= 0:
        raise ConfigError(f"dirichlet alpha must be positive, got {alpha}")
    for _ in range(1000):
        assignment = np.empty(dataset.n, dtype=np.int64)
        for cls in range(dataset.num_classes):
            idx = np.flatnonzero(dataset.labels == cls)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n_clients, alpha))
            bounds = (np.cumsum(props) * idx.shape[0]).astype(np.int64)[:-1]
            for cid, part in enumerate(np.split(idx, bounds)):
                assignment[part] = cid
        if np.bincount(assignment, minlength=n_clients).min() >= 1:
            return PartitionPlan(assignment, n_clients, scheme)
    raise ConfigError(
        f"dirichlet partition kept starving a client (alpha={alpha}, n_clients={n_clients})")


def train_test_split_stratified(dataset: Dataset, test_fraction: float, seed: int):
    """(train, test) split with per-class proportions preserved."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.Generator(np.random.PCG64(seed))
    test_idx = []
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        rng.shuffle(idx)
        k = max(1, int(round(test_fraction * idx.shape[0])))
        if k >= idx.shape[0]:
            raise ConfigError(f"class {cls} too small to split")
        test_idx.append(idx[:k])
    test_mask = np.zeros(dataset.n, dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    return dataset.subset(np.flatnonzero(~test_mask)), dataset.subset(np.flatnonzero(test_mask))
