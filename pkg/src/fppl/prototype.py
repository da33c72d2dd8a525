"""Class prototypes: per-client means, client-uniform global means, cross-task pool."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np


@dataclass(frozen=True)
class LocalPrototypeSet:
    client: int
    task: int
    prototypes: Mapping[int, np.ndarray]
    counts: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        protos = {}
        for y in sorted(self.prototypes):
            v = np.array(self.prototypes[y], dtype=np.float64, copy=True)
            v.setflags(write=False)
            protos[int(y)] = v
        object.__setattr__(self, "prototypes", MappingProxyType(protos))
        object.__setattr__(self, "counts", MappingProxyType(dict(self.counts)))

    @property
    def classes(self) -> list[int]:
        return list(self.prototypes)

    def __len__(self):
        return len(self.prototypes)

    def num_floats(self) -> int:
        return sum(v.size for v in self.prototypes.values())


def local_prototypes(features, labels, client: int = 0, task: int = 1) -> LocalPrototypeSet:
    """Per-class arithmetic mean of the given feature vectors."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError(
            f"features must be (n, D) matching {labels.shape[0]} labels, got {features.shape}")
    protos, counts = {}, {}
    for y in np.unique(labels):
        mask = labels == y
        protos[int(y)] = features[mask].mean(axis=0)
        counts[int(y)] = int(mask.sum())
    return LocalPrototypeSet(client, task, protos, counts)


def global_prototypes(uploads: Iterable[LocalPrototypeSet]) -> dict[int, np.ndarray]:
    """Mean over the clients holding each class, every client weighted equally."""
    acc: dict[int, list[np.ndarray]] = {}
    for up in sorted(uploads, key=lambda u: u.client):
        for y, v in up.prototypes.items():
            acc.setdefault(y, []).append(v)
    return {y: np.mean(np.stack(vs), axis=0) for y, vs in sorted(acc.items())}


class PrototypePool:
    """Append-only store of local prototype sets keyed by (task, client)."""

    def __init__(self):
        self._entries: dict[tuple[int, int], LocalPrototypeSet] = {}
        self._tasks: set[int] = set()

    def merge(self, task: int, uploads: Iterable[LocalPrototypeSet]) -> "PrototypePool":
        if task in self._tasks:
            raise ValueError(f"task {task} already merged into the pool")
        self._tasks.add(task)
        for up in uploads:
            if len(up):
                self._entries[(task, up.client)] = up
        return self

    @property
    def tasks(self) -> set[int]:
        return set(self._tasks)

    def __len__(self):
        return len(self._entries)

    def entries(self) -> list[LocalPrototypeSet]:
        return [self._entries[k] for k in sorted(self._entries)]

    def labelled(self) -> list[tuple[int, np.ndarray]]:
        """Flattened (class, prototype) pairs in (task, client, class) order."""
        return [(y, v) for e in self.entries() for y, v in e.prototypes.items()]

    def num_floats(self) -> int:
        return sum(e.num_floats() for e in self._entries.values())


def merge_pool(pool: PrototypePool, task: int, final_uploads) -> PrototypePool:
    return pool.merge(task, final_uploads)
