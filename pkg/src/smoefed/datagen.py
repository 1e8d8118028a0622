"""Synthetic clustered tasks, label-wise Dirichlet non-IID partitioning,
and train/val/test splitting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass
class Dataset:
    inputs: np.ndarray                 # num_examples x dim
    labels: np.ndarray                 # class ids (classification) or targets
    task_kind: str = "classification"
    class_count: int = 0

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx],
                       self.task_kind, self.class_count)


@dataclass
class Partition:
    client_indices: list[np.ndarray] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def generate_clustered_task(classes: int, per_class: int, dim: int,
                            spread: float, seed: int,
                            separation: float = 6.0,
                            task_kind: str = "classification") -> Dataset:
    """Gaussian clusters around well-separated class centers.

    Classification labels the cluster id; regression attaches a
    per-cluster linear target so experts can specialize by region.
    """
    if classes < 2 or per_class < 1 or dim < 1:
        raise DomainError(
            f"need classes >= 2, per_class >= 1, dim >= 1; "
            f"got {classes}, {per_class}, {dim}"
        )
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation

    inputs = np.empty((classes * per_class, dim))
    class_ids = np.repeat(np.arange(classes), per_class)
    for c in range(classes):
        block = slice(c * per_class, (c + 1) * per_class)
        inputs[block] = centers[c] + spread * rng.normal(size=(per_class, dim))

    if task_kind == "classification":
        return Dataset(inputs, class_ids, "classification", classes)
    if task_kind == "regression":
        maps = rng.normal(size=(classes, dim)) / np.sqrt(dim)
        targets = np.array([
            [maps[c] @ x] for c, x in zip(class_ids, inputs)
        ])
        return Dataset(inputs, targets, "regression", classes)
    raise DomainError(f"unknown task_kind {task_kind!r}")


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to total, proportional to shares, rounding
    by largest fractional remainder (ties to the lowest index)."""
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    leftover = total - counts.sum()
    if leftover > 0:
        fracs = raw - counts
        order = np.argsort(-fracs, kind="stable")
        counts[order[:leftover]] += 1
    return counts


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float,
                        rng: np.random.Generator,
                        max_redraws: int = 10) -> Partition:
    """Label-wise Dirichlet split: per class, client shares are drawn
    from Dirichlet(alpha) and examples assigned by largest-remainder
    rounding. Redraws if any client ends up empty."""
    if num_clients < 1:
        raise DomainError(f"num_clients must be >= 1, got {num_clients}")
    if alpha <= 0:
        raise DomainError(f"Dirichlet alpha must be > 0, got {alpha}")
    labels = np.asarray(ds.labels).ravel()
    classes = np.unique(labels)
    for _ in range(max_redraws):
        buckets = [[] for _ in range(num_clients)]
        for c in classes:
            class_idx = np.flatnonzero(labels == c)
            class_idx = rng.permutation(class_idx)
            shares = rng.dirichlet(np.full(num_clients, alpha))
            counts = _largest_remainder(shares, len(class_idx))
            start = 0
            for i, cnt in enumerate(counts):
                buckets[i].extend(class_idx[start:start + cnt])
                start += cnt
        if num_clients == 1 or all(buckets):
            return Partition([np.array(sorted(b), dtype=np.int64) for b in buckets])
    raise DomainError(
        f"Dirichlet partition left a client empty after {max_redraws} redraws "
        f"(alpha={alpha}, clients={num_clients}); use a larger dataset or alpha"
    )


def split_80_10_10(ds: Dataset, rng: np.random.Generator):
    """Disjoint 80/10/10 index split (floor/floor/remainder)."""
    n = len(ds)
    if n < 10:
        raise DomainError(f"dataset too small to split: {n} examples")
    perm = rng.permutation(n)
    n_train = int(np.floor(0.8 * n))
    n_val = int(np.floor(0.1 * n))
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])
    return train, val, test


def dataset_to_csv(ds: Dataset, path) -> None:
    dim = ds.inputs.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x_{i}" for i in range(dim)] + ["label"])
        for x, y in zip(ds.inputs, np.asarray(ds.labels).ravel()):
            row = [repr(float(v)) for v in x]
            if ds.task_kind == "classification":
                row.append(str(int(y)))
            else:
                row.append(repr(float(y)))
            w.writerow(row)


def dataset_from_csv(path, task_kind: str = "classification") -> Dataset:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        dim = len(header) - 1
        xs, ys = [], []
        for row in reader:
            xs.append([float(v) for v in row[:dim]])
            ys.append(int(row[dim]) if task_kind == "classification" else float(row[dim]))
    inputs = np.array(xs)
    if task_kind == "classification":
        labels = np.array(ys, dtype=np.int64)
        return Dataset(inputs, labels, "classification", int(labels.max()) + 1)
    return Dataset(inputs, np.array(ys)[:, None], "regression", 0)
