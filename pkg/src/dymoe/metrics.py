"""Continual-learning aggregates over an accuracy matrix, plus routing statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import AMBIGUOUS, FIRST_TASK, NEW, OLD

TYPE_NAMES = {FIRST_TASK: "first_task", NEW: "new", OLD: "old", AMBIGUOUS: "ambiguous"}


class AccuracyMatrix:
    """Lower-triangular ``a[j][i]``: accuracy on task ``i`` after training task ``j`` (1-indexed)."""

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ValueError("an accuracy matrix needs at least one task")
        self.n_tasks = n_tasks
        self._a = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        rows = [list(r) for r in rows]
        if not rows:
            raise ValueError("empty accuracy matrix")
        m = cls(len(rows))
        for j, row in enumerate(rows, start=1):
            if len(row) != j:
                raise ValueError(f"row {j} must have {j} entries, got {len(row)}")
            for i, v in enumerate(row, start=1):
                m.set(j, i, v)
        return m

    def _check(self, j: int, i: int) -> None:
        if not (1 <= i <= j <= self.n_tasks):
            raise IndexError(f"entry ({j}, {i}) outside the lower triangle of a {self.n_tasks}-task matrix")

    def set(self, j: int, i: int, value: float) -> None:
        self._check(j, i)
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self._a[j - 1, i - 1] = value

    def get(self, j: int, i: int) -> float:
        self._check(j, i)
        return float(self._a[j - 1, i - 1])

    def row(self, j: int) -> list[float]:
        return [self.get(j, i) for i in range(1, j + 1)]

    def rows(self) -> list[list[float]]:
        return [self.row(j) for j in range(1, self.n_tasks + 1)]

    def is_complete(self) -> bool:
        return not np.isnan(self._a[np.tril_indices(self.n_tasks)]).any()

    def to_json(self, config_hash: str = "") -> str:
        return json.dumps({"config_hash": config_hash, "n_tasks": self.n_tasks, "rows": self.rows()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AccuracyMatrix":
        return cls.from_rows(json.loads(text)["rows"])


def _full(m: AccuracyMatrix) -> np.ndarray:
    if not m.is_complete():
        raise ValueError("accuracy matrix has unfilled entries")
    return m._a


def mfn(m: AccuracyMatrix) -> float:
    """Mean of the last row."""
    a = _full(m)
    return float(np.mean(a[-1]))


def maa(m: AccuracyMatrix) -> float:
    """Mean over rows of each row's mean."""
    a = _full(m)
    return float(np.mean([np.mean(a[j, : j + 1]) for j in range(m.n_tasks)]))


def bwt(m: AccuracyMatrix) -> float:
    """Mean over tasks of final minus just-trained accuracy."""
    a = _full(m)
    return float(np.mean(a[-1] - np.diag(a)))


@dataclass(frozen=True)
class EvalRecord:
    """Raw outcome of evaluating task ``task`` after training task ``after``."""

    after: int
    task: int
    correct: int
    total: int


def matrix_from_records(records: list[EvalRecord], n_tasks: int) -> AccuracyMatrix:
    m = AccuracyMatrix(n_tasks)
    for r in records:
        m.set(r.after, r.task, r.correct / r.total)
    return m


def summarize(m: AccuracyMatrix) -> dict[str, float]:
    return {"mfn": mfn(m), "maa": maa(m), "bwt": bwt(m)}


def metrics_csv(rows: list[tuple[str, str, float]]) -> str:
    """``run_id,metric,value`` CSV; values are fractions written with ``repr`` precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "metric", "value"])
    for run_id, metric, value in rows:
        w.writerow([run_id, metric, repr(float(value))])
    return buf.getvalue()


# -- routing statistics ----------------------------------------------------------


@dataclass
class RoutingStats:
    activation: dict[str, np.ndarray] = field(default_factory=dict)  # site -> per-expert counts
    group_mass: dict[str, np.ndarray] = field(default_factory=dict)  # site -> summed weight per group
    type_hist: dict[str, int] = field(default_factory=dict)
    n_tokens: int = 0

    def merge(self, other: "RoutingStats") -> "RoutingStats":
        out = RoutingStats(n_tokens=self.n_tokens + other.n_tokens)
        for attr in ("activation", "group_mass"):
            a, b = getattr(self, attr), getattr(other, attr)
            getattr(out, attr).update({k: a.get(k, 0) + b.get(k, 0) for k in set(a) | set(b)})
        out.type_hist = {k: self.type_hist.get(k, 0) + other.type_hist.get(k, 0) for k in TYPE_NAMES.values()}
        return out


def routing_stats(traces: dict, registries: dict) -> RoutingStats:
    """Aggregate one forward pass's per-site routing traces.

    A token counts as activating expert ``i`` when its routing weight on ``i``
    is nonzero. The type histogram counts every (site, token) pair.
    """
    if set(traces) - set(registries):
        raise ValueError(f"traces for unknown sites {sorted(set(traces) - set(registries))}")
    stats = RoutingStats(type_hist={v: 0 for v in TYPE_NAMES.values()})
    for site, r in traces.items():
        reg = registries[site]
        w = r.weights.data
        if w.shape[1] != reg.n_experts:
            raise ValueError(f"site {site}: trace has {w.shape[1]} experts, registry has {reg.n_experts}")
        stats.activation[site] = (w > 0).sum(axis=0).astype(np.int64)
        owners = np.asarray(reg.owners)
        groups = [g.task for g in reg.groups]
        stats.group_mass[site] = np.array([w[:, owners == t].sum() for t in groups])
        codes, counts = np.unique(r.types, return_counts=True)
        for c, n in zip(codes, counts):
            stats.type_hist[TYPE_NAMES[int(c)]] += int(n)
        stats.n_tokens = max(stats.n_tokens, w.shape[0])
    return stats


def dominant_group(traces: dict, registries: dict) -> dict[str, np.ndarray]:
    """Per-site owner task of each token's top-1 group (argmax over group max-logits)."""
    out = {}
    for site, r in traces.items():
        reg = registries[site]
        logits = r.logits.data
        owners = np.asarray(reg.owners)
        tasks = [g.task for g in reg.groups]
        per_group = np.stack([logits[:, owners == t].max(axis=1) for t in tasks], axis=1)
        out[site] = np.asarray(tasks)[np.argmax(per_group, axis=1)]
    return out


def drift_rate(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> float:
    """Fraction of (site, token) pairs whose dominant group changed."""
    if set(before) != set(after):
        raise ValueError("drift needs the same sites in both snapshots")
    flips = total = 0
    for site in before:
        a, b = before[site], after[site]
        if a.shape != b.shape:
            raise ValueError(f"site {site}: token count differs between snapshots")
        flips += int(np.count_nonzero(a != b))
        total += a.size
    return flips / total if total else 0.0


__all__ = [
    "AccuracyMatrix",
    "EvalRecord",
    "RoutingStats",
    "mfn",
    "maa",
    "bwt",
    "summarize",
    "matrix_from_records",
    "metrics_csv",
    "routing_stats",
    "dominant_group",
    "drift_rate",
    "TYPE_NAMES",
]
