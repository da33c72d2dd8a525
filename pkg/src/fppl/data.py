"""Synthetic class-incremental data, task splits and label-skew partitioning."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NOISE_SIGMA = 0.1
MAX_PARTITION_RETRIES = 100


@dataclass(frozen=True)
class DataSpec:
    num_classes: int = 20
    train_per_class: int = 30
    test_per_class: int = 10
    beta: float = 0.5
    partition: str = "dirichlet"  # or "pinned": every client holds every task class
    seed: int = 0

    def __post_init__(self):
        if min(self.num_classes, self.train_per_class, self.test_per_class) <= 0:
            raise ValueError("class and sample counts must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.partition not in ("dirichlet", "pinned"):
            raise ValueError(f"unknown partition mode {self.partition!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    train_x: np.ndarray  # (n, C, S, S) in [0, 1]
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1


def generate_synthetic_dataset(num_classes: int, train_per_class: int, test_per_class: int,
                               image_shape=(1, 8, 8), seed: int = 0,
                               check: bool = True) -> Dataset:
    """Each class is a random template image; samples add Gaussian noise and clip."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    templates = rng.uniform(0.0, 1.0, size=(num_classes,) + tuple(image_shape))

    def draw(per_class):
        y = np.repeat(np.arange(num_classes), per_class)
        x = templates[y] + rng.normal(0.0, NOISE_SIGMA, size=(len(y),) + tuple(image_shape))
        return np.clip(x, 0.0, 1.0), y

    train_x, train_y = draw(train_per_class)
    test_x, test_y = draw(test_per_class)
    ds = Dataset(train_x, train_y, test_x, test_y)
    if check:
        acc = linear_probe_accuracy(ds)
        if acc < 0.95:
            raise RuntimeError(f"synthetic classes not linearly separable (probe acc {acc:.3f})")
    return ds


def linear_probe_accuracy(ds: Dataset, ridge: float = 1e-2) -> float:
    """Test accuracy of a ridge-regression one-vs-rest probe on raw pixels."""
    X = ds.train_x.reshape(len(ds.train_x), -1)
    X = np.hstack([X, np.ones((len(X), 1))])
    Y = np.eye(ds.num_classes)[ds.train_y]
    W = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ Y)
    Xt = ds.test_x.reshape(len(ds.test_x), -1)
    Xt = np.hstack([Xt, np.ones((len(Xt), 1))])
    return float(np.mean((Xt @ W).argmax(1) == ds.test_y))


def split_tasks(num_classes: int, num_tasks: int, seed: int) -> list[list[int]]:
    if num_tasks <= 0 or num_classes % num_tasks:
        raise ValueError(f"{num_classes} classes cannot be split into {num_tasks} equal tasks")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x7A5C])).permutation(num_classes)
    size = num_classes // num_tasks
    return [sorted(int(c) for c in perm[i * size:(i + 1) * size]) for i in range(num_tasks)]


def _largest_remainder(props: np.ndarray, n: int) -> np.ndarray:
    raw = props * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    # stable sort: ties go to the lower client id
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def dirichlet_partition(indices, labels, num_clients: int, beta: float, rng,
                        max_retries: int = MAX_PARTITION_RETRIES) -> list[np.ndarray]:
    """Class-wise Dirichlet(beta) split of one task's training indices.

    The whole task assignment is redrawn until every client holds at least one
    sample.
    """
    if beta <= 0 or num_clients < 1:
        raise ValueError("need beta > 0 and at least one client")
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    if len(indices) < num_clients:
        raise ValueError(f"{len(indices)} samples cannot cover {num_clients} clients")
    classes = np.unique(labels)
    for _ in range(max_retries):
        shards: list[list[int]] = [[] for _ in range(num_clients)]
        for c in classes:
            idx = rng.permutation(indices[labels == c])
            counts = _largest_remainder(rng.dirichlet(np.full(num_clients, beta)), len(idx))
            bounds = np.concatenate([[0], np.cumsum(counts)])
            for k in range(num_clients):
                shards[k].extend(idx[bounds[k]:bounds[k + 1]].tolist())
        if all(shards):
            return [np.sort(np.array(s, dtype=int)) for s in shards]
    raise RuntimeError(
        f"could not give every client a sample after {max_retries} draws "
        f"(beta={beta}); use larger shards or fewer clients")


def pinned_partition(indices, labels, num_clients: int, rng) -> list[np.ndarray]:
    """Even per-class split, so every client holds every class of the task."""
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    shards: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(indices[labels == c])
        if len(idx) < num_clients:
            raise ValueError(f"class {c} has fewer samples than clients")
        for k, part in enumerate(np.array_split(idx, num_clients)):
            shards[k].extend(part.tolist())
    return [np.sort(np.array(s, dtype=int)) for s in shards]


def partition_plan(ds: Dataset, tasks: list[list[int]], num_clients: int, spec: DataSpec,
                   seed: int) -> list[list[np.ndarray]]:
    """plan[t][k] = train indices of client k for task t (0-based task index)."""
    plan = []
    for t, classes in enumerate(tasks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A27, t]))
        idx = np.flatnonzero(np.isin(ds.train_y, classes))
        if spec.partition == "pinned":
            plan.append(pinned_partition(idx, ds.train_y[idx], num_clients, rng))
        else:
            plan.append(dirichlet_partition(idx, ds.train_y[idx], num_clients, spec.beta, rng))
    return plan


def label_skew_tv(shards, labels, classes) -> float:
    """Mean pairwise total-variation distance between client label distributions."""
    dists = []
    for s in shards:
        counts = np.array([np.sum(labels[s] == c) for c in classes], dtype=float)
        dists.append(counts / max(counts.sum(), 1))
    tv = [0.5 * np.abs(a - b).sum() for i, a in enumerate(dists) for b in dists[i + 1:]]
    return float(np.mean(tv)) if tv else 0.0


def write_partition_csv(path, plan, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "client", "class", "count"])
        for t, shards in enumerate(plan, start=1):
            for k, s in enumerate(shards):
                ys, cs = np.unique(labels[s], return_counts=True)
                for y, c in zip(ys, cs):
                    w.writerow([t, k, int(y), int(c)])


def save_dataset(path, ds: Dataset) -> None:
    np.savez(path, **{k: np.asarray(v, dtype="<f8" if k.endswith("x") else "<i8")
                      for k, v in asdict(ds).items()})


def load_dataset(path) -> Dataset:
    with np.load(path) as z:
        return Dataset(z["train_x"], z["train_y"], z["test_x"], z["test_y"])


def load_class_directory(root) -> Dataset:
    """Load ``root/{train,test}/<class_id>/*.npy`` image arrays (optional real data)."""
    root = Path(root)
    parts = []
    for split in ("train", "test"):
        xs, ys = [], []
        for cdir in sorted((root / split).iterdir(), key=lambda p: int(p.name)):
            for f in sorted(cdir.glob("*.npy")):
                xs.append(np.load(f).astype(np.float64))
                ys.append(int(cdir.name))
        parts += [np.stack(xs), np.array(ys)]
    return Dataset(*parts)
