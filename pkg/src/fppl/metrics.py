"""Continual-learning accuracy/forgetting metrics and closed-form cost counts."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class AccuracyMatrix:
    """Lower-triangular grid ``a[i][t]``: accuracy on task i after learning task t (1-based)."""

    def __init__(self, num_tasks: int):
        self.num_tasks = num_tasks
        self._a = np.full((num_tasks, num_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        """Build from rows ``rows[i-1][t-1]``; entries with t < i are ignored."""
        m = cls(len(rows))
        for i, row in enumerate(rows, start=1):
            for t in range(i, m.num_tasks + 1):
                m.set(i, t, row[t - 1])
        return m

    def set(self, i: int, t: int, value: float) -> None:
        if not 1 <= i <= t <= self.num_tasks:
            raise IndexError(f"a[{i}][{t}] outside the lower triangle")
        self._a[i - 1, t - 1] = value

    def get(self, i: int, t: int) -> float:
        return float(self._a[i - 1, t - 1])

    def is_complete(self, through: int | None = None) -> bool:
        through = self.num_tasks if through is None else through
        return all(not np.isnan(self._a[i, t]) for t in range(through) for i in range(t + 1))

    def rows(self) -> list[list[float | None]]:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self._a]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task"] + [f"after_{t}" for t in range(1, self.num_tasks + 1)])
            for i, row in enumerate(self.rows(), start=1):
                w.writerow([i] + ["" if v is None else repr(v) for v in row])


def evaluate_task(logits: np.ndarray, labels, seen_classes) -> float:
    """Accuracy with argmax restricted to seen classes, ties to the lowest class id."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    seen = np.array(sorted(seen_classes))
    pred = seen[np.argmax(np.asarray(logits)[:, seen], axis=1)]
    return float(np.mean(pred == labels))


def avg_accuracy(matrix: AccuracyMatrix) -> tuple[list[float], float]:
    T = matrix.num_tasks
    if not matrix.is_complete():
        raise ValueError("accuracy matrix is incomplete")
    A = [sum(matrix.get(i, t) for i in range(1, t + 1)) / t for t in range(1, T + 1)]
    return A, sum(A) / T


def avg_forgetting(matrix: AccuracyMatrix) -> tuple[float, bool]:
    """Average forgetting and a flag that is True when T < 2 (value reported as 0)."""
    T = matrix.num_tasks
    if T < 2:
        return 0.0, True
    if not matrix.is_complete():
        raise ValueError("accuracy matrix is incomplete")
    total = 0.0
    for i in range(1, T):
        total += max(matrix.get(i, t) - matrix.get(i, T) for t in range(i, T))
    return total / (T - 1), False


@dataclass(frozen=True)
class CostInputs:
    D: int
    N_all: int
    T: int
    L_p: int
    M: int
    K: int = 1


def comm_cost(c: CostInputs) -> int:
    """Floats sent per client per round: psi, prompt, classifier and task prototypes."""
    if c.N_all % c.T:
        raise ValueError(f"N_all={c.N_all} not divisible by T={c.T}")
    return c.D * (c.N_all + c.T + c.N_all // c.T + c.L_p * c.M) + c.N_all


def extra_storage(c: CostInputs) -> int:
    return c.D * c.L_p * c.M * c.T


def tunable_param_count(c: CostInputs) -> int:
    return c.D * (c.L_p * c.M + c.T)


def server_pool_storage(c: CostInputs) -> int:
    return c.D * c.K * c.N_all


def upload_floats(D: int, N_all: int, task: int, L_p: int, M: int, num_prototypes: int) -> int:
    """Live count of one client upload at ``task``; equals comm_cost at the final task
    when the client holds every task class."""
    return D * task + D * L_p * M + D * N_all + N_all + D * num_prototypes
