"""Accuracy-matrix bookkeeping, average accuracy / forgetting, result files.

Task and checkpoint indices are 1-based everywhere in this module, matching
the usual ``a[t][k]`` notation: accuracy on task ``k`` after training
through task ``t``.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import StructuralError

MATRIX_HEADER = ("trained_through", "eval_task", "accuracy")
CURVES_HEADER = ("task", "checkpoint", "accuracy")


class AccuracyMatrix:
    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise StructuralError("accuracy matrix needs at least one task")
        self.n_tasks = n_tasks
        self._a = np.full((n_tasks, n_tasks), np.nan)

    def _check(self, t: int, k: int) -> None:
        if not (1 <= k <= t <= self.n_tasks):
            raise StructuralError(f"entry ({t}, {k}) outside the lower triangle of a {self.n_tasks}-task matrix")

    def record(self, t: int, k: int, accuracy: float) -> None:
        self._check(t, k)
        accuracy = float(accuracy)
        if not 0.0 <= accuracy <= 1.0:
            raise StructuralError(f"accuracy {accuracy} outside [0, 1]")
        self._a[t - 1, k - 1] = accuracy

    def __getitem__(self, tk) -> float:
        t, k = tk
        self._check(t, k)
        value = self._a[t - 1, k - 1]
        if np.isnan(value):
            raise StructuralError(f"entry ({t}, {k}) has not been recorded")
        return float(value)

    @property
    def T(self) -> int:
        """Number of leading checkpoints whose row is completely filled."""
        done = 0
        for t in range(1, self.n_tasks + 1):
            if np.isnan(self._a[t - 1, :t]).any():
                break
            done = t
        return done

    def entries(self):
        for t in range(1, self.T + 1):
            for k in range(1, t + 1):
                yield t, k, float(self._a[t - 1, k - 1])

    def row(self, t: int) -> np.ndarray:
        return np.array([self[t, k] for k in range(1, t + 1)])

    def as_array(self) -> np.ndarray:
        return self._a.copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, AccuracyMatrix):
            return NotImplemented
        return self.n_tasks == other.n_tasks and np.array_equal(self._a, other._a, equal_nan=True)


def average_accuracy(m: AccuracyMatrix, t: int | None = None) -> float:
    t = m.T if t is None else t
    if not 1 <= t <= m.T:
        raise StructuralError(f"average_accuracy at t={t} but only {m.T} checkpoints are complete")
    return sum(m[t, k] for k in range(1, t + 1)) / t


def average_forgetting(m: AccuracyMatrix, t: int | None = None) -> float:
    """Mean over earlier tasks of best-earlier-accuracy minus accuracy at ``t``.

    The best earlier accuracy for task ``k`` is taken over checkpoints
    ``k..t-1``, the only ones where task ``k`` has been evaluated. A term is
    negative when a task ends up better than it ever was before.
    """
    t = m.T if t is None else t
    if t < 2:
        raise StructuralError("average_forgetting needs at least two completed tasks")
    if t > m.T:
        raise StructuralError(f"average_forgetting at t={t} but only {m.T} checkpoints are complete")
    total = 0.0
    for k in range(1, t):
        best = max(m[tau, k] for tau in range(k, t))
        total += best - m[t, k]
    return total / (t - 1)


def percent(x: float) -> str:
    return f"{100.0 * x:.4f}"


def write_accuracy_csv(m: AccuracyMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MATRIX_HEADER)
        for t, k, acc in m.entries():
            w.writerow((t, k, repr(acc)))


def read_accuracy_csv(path) -> AccuracyMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != MATRIX_HEADER:
        raise StructuralError(f"{path}: expected header {','.join(MATRIX_HEADER)}")
    body = [(int(t), int(k), float(a)) for t, k, a in rows[1:]]
    n = max((t for t, _, _ in body), default=0)
    m = AccuracyMatrix(max(n, 1))
    for t, k, a in body:
        m.record(t, k, a)
    return m


def write_curves_csv(m: AccuracyMatrix, path) -> None:
    """Long-format accuracy evolution: one row per (task, checkpoint >= task)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVES_HEADER)
        for k in range(1, m.T + 1):
            for t in range(k, m.T + 1):
                w.writerow((k, t, repr(m[t, k])))


def summarize(m: AccuracyMatrix, **extra) -> dict:
    T = m.T
    out = dict(extra)
    out["tasks_completed"] = T
    if T >= 1:
        out["average_accuracy"] = average_accuracy(m, T)
        out["per_task_final"] = [m[T, k] for k in range(1, T + 1)]
        out["average_accuracy_by_checkpoint"] = [average_accuracy(m, t) for t in range(1, T + 1)]
    if T >= 2:
        out["average_forgetting"] = average_forgetting(m, T)
    return out


def emit_results(m: AccuracyMatrix, log=None, out_dir=".", **extra) -> dict:
    """Write ``accuracy_matrix.csv``, ``curves.csv``, ``metrics.json`` (and
    ``run_log.txt`` when a log is given) into ``out_dir``. Returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "accuracy_matrix": out_dir / "accuracy_matrix.csv",
        "curves": out_dir / "curves.csv",
        "metrics": out_dir / "metrics.json",
    }
    write_accuracy_csv(m, paths["accuracy_matrix"])
    write_curves_csv(m, paths["curves"])
    with open(paths["metrics"], "w") as f:
        json.dump(summarize(m, **extra), f, indent=2, sort_keys=True)
        f.write("\n")
    if log is not None:
        paths["run_log"] = out_dir / "run_log.txt"
        with open(paths["run_log"], "w") as f:
            for line in log.lines():
                f.write(line + "\n")
    return paths
