"""Deterministic synthetic token-classification task streams and a reservoir replay buffer.

Vocabulary layout: ids ``[0, n_shared)`` form the shared pool whose labels
come from one base table reused by every task (and by the pretraining task);
the remaining ids are split into per-task private blocks, each with its own
random label table. A task's ``overlap`` is the probability that a position
draws from the shared pool instead of the task's private block, so ``overlap``
controls how many "old-looking" tokens show up in new-task data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class StreamLayout:
    vocab_size: int = 64
    seq_len: int = 16
    n_classes: int = 4
    n_shared: int = 16
    private_size: int = 12

    def __post_init__(self):
        if self.n_shared + self.private_size > self.vocab_size:
            raise ValueError("shared pool plus one private block exceed the vocabulary")
        if min(self.vocab_size, self.seq_len, self.n_classes, self.private_size) < 1 or self.n_shared < 0:
            raise ValueError("stream layout sizes must be positive")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    n_classes: int = 4
    n_train: int = 2000
    n_test: int = 500
    token_shift: int | None = None  # rotation of the private block; default (task_id - 1) * private_size
    overlap: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if self.n_train < 0 or self.n_test < 0 or self.n_classes < 1:
            raise ValueError("sample counts must be non-negative and n_classes positive")


@dataclass
class TaskDataset:
    task_id: int
    train_tokens: np.ndarray
    train_labels: np.ndarray
    test_tokens: np.ndarray
    test_labels: np.ndarray
    private_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "train":
            return self.train_tokens, self.train_labels
        if which == "test":
            return self.test_tokens, self.test_labels
        raise ValueError(f"unknown split {which!r}")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def base_labels(seed: int, layout: StreamLayout) -> np.ndarray:
    """Label of every vocabulary id under the shared base table."""
    return _rng(seed, 0x5EED).integers(0, layout.n_classes, size=layout.vocab_size)


def private_block(spec: TaskSpec, layout: StreamLayout) -> np.ndarray:
    n_private = layout.vocab_size - layout.n_shared
    shift = (spec.task_id - 1) * layout.private_size if spec.token_shift is None else spec.token_shift
    return layout.n_shared + (shift + np.arange(layout.private_size)) % n_private


def _sample(rng, n, pool_shared, pool_private, table, overlap, seq_len):
    shared = rng.random((n, seq_len)) < overlap
    if len(pool_shared) == 0:
        shared[:] = False
    a = pool_shared[rng.integers(0, max(len(pool_shared), 1), size=(n, seq_len))] if len(pool_shared) else 0
    b = pool_private[rng.integers(0, len(pool_private), size=(n, seq_len))]
    tokens = np.where(shared, a, b).astype(np.int64)
    return tokens, table[tokens].astype(np.int64)


def generate_task(seed: int, spec: TaskSpec, layout: StreamLayout = StreamLayout()) -> TaskDataset:
    """One task's train/test data; a pure function of ``(seed, spec, layout)``."""
    if spec.n_classes != layout.n_classes:
        raise ValueError("TaskSpec.n_classes must match the layout")
    rng = _rng(seed, 0x7A5C, spec.task_id)
    table = base_labels(seed, layout).copy()
    private = private_block(spec, layout)
    table[private] = rng.integers(0, layout.n_classes, size=len(private))
    if spec.overlap >= 1.0:
        # every position from the shared base distribution
        pool_private = np.arange(layout.n_shared) if layout.n_shared else private
        table = base_labels(seed, layout)
    else:
        pool_private = private
    n = spec.n_train + spec.n_test
    tokens, labels = _sample(rng, n, np.arange(layout.n_shared), pool_private, table, spec.overlap, layout.seq_len)
    return TaskDataset(
        spec.task_id,
        tokens[: spec.n_train],
        labels[: spec.n_train],
        tokens[spec.n_train :],
        labels[spec.n_train :],
        private,
    )


def generate_base_task(seed: int, layout: StreamLayout = StreamLayout(), n_train: int = 4000, n_test: int = 500) -> TaskDataset:
    """Pretraining task: uniform tokens over the whole vocabulary, base labels."""
    rng = _rng(seed, 0xBA5E)
    table = base_labels(seed, layout)
    n = n_train + n_test
    tokens = rng.integers(0, layout.vocab_size, size=(n, layout.seq_len)).astype(np.int64)
    labels = table[tokens].astype(np.int64)
    return TaskDataset(0, tokens[:n_train], labels[:n_train], tokens[n_train:], labels[n_train:])


def generate_stream(seed: int, specs: list[TaskSpec], layout: StreamLayout = StreamLayout()) -> list[TaskDataset]:
    if not specs:
        raise ValueError("a stream needs at least one task")
    return [generate_task(seed, s, layout) for s in specs]


def default_specs(n_tasks: int = 4, overlap: float = 0.3, n_train: int = 2000, n_test: int = 500) -> list[TaskSpec]:
    return [TaskSpec(t, n_train=n_train, n_test=n_test, overlap=overlap) for t in range(1, n_tasks + 1)]


def export_jsonl(datasets: list[TaskDataset], path, split: str = "test") -> None:
    """One line per sample: ``{"tokens": [...], "labels": [...], "task": t}``."""
    with open(path, "w") as fh:
        for ds in datasets:
            toks, labs = ds.split(split)
            for x, y in zip(toks, labs):
                fh.write(json.dumps({"tokens": x.tolist(), "labels": y.tolist(), "task": ds.task_id}) + "\n")


def load_jsonl(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Samples grouped by task id as ``(tokens, labels)`` arrays."""
    groups: dict[int, tuple[list, list]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        xs, ys = groups.setdefault(int(rec["task"]), ([], []))
        xs.append(rec["tokens"])
        ys.append(rec["labels"])
    return {t: (np.asarray(x, dtype=np.int64), np.asarray(y, dtype=np.int64)) for t, (x, y) in sorted(groups.items())}


class ReplayBuffer:
    """Fixed-capacity reservoir of past samples tagged with their task."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.tokens: list[np.ndarray] = []
        self.labels: list[np.ndarray] = []
        self.tasks: list[int] = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.tasks)

    def push(self, tokens, labels, task: int, rng: np.random.Generator) -> None:
        """Offer one sample; past capacity it replaces a slot with probability capacity/seen."""
        self.seen += 1
        if self.capacity == 0:
            return
        if len(self.tasks) < self.capacity:
            self.tokens.append(np.asarray(tokens))
            self.labels.append(np.asarray(labels))
            self.tasks.append(task)
            return
        j = int(rng.integers(0, self.seen))
        if j < self.capacity:
            self.tokens[j] = np.asarray(tokens)
            self.labels[j] = np.asarray(labels)
            self.tasks[j] = task

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Up to ``batch_size`` distinct samples: (tokens, labels, tasks) arrays."""
        n = min(batch_size, len(self.tasks))
        if n == 0:
            return np.zeros((0, 0), np.int64), np.zeros((0, 0), np.int64), np.zeros(0, np.int64)
        idx = rng.choice(len(self.tasks), size=n, replace=False)
        return (
            np.stack([self.tokens[i] for i in idx]),
            np.stack([self.labels[i] for i in idx]),
            np.asarray([self.tasks[i] for i in idx], dtype=np.int64),
        )


def replay_push(buffer: ReplayBuffer, tokens, labels, task: int, rng: np.random.Generator) -> None:
    buffer.push(tokens, labels, task, rng)


def replay_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator):
    return buffer.sample(batch_size, rng)
