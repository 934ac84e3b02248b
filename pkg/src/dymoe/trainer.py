"""Continual training loop: expand, train the new task's parameters, evaluate, snapshot."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tc
from .backbone import Model
from .drift import combine_losses, rsr_terms, site_load_balance
from .kernels import AMBIGUOUS, NEW, OLD
from .layer import FREE_POLICY, TAG_POLICY, prune_experts
from .metrics import AccuracyMatrix, EvalRecord
from .optim import AdamW, clip_grad_norm
from .taskgen import ReplayBuffer, TaskDataset
from .tensor import Graph, backward

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    batch_size: int = 32
    steps_per_task: int = 500
    lam: float = 1e-3
    alpha: float = 1e-3
    tag_enabled: bool = True
    rsr_enabled: bool = True
    aux_enabled: bool = True
    replay_capacity: int = 0
    replay_every: int = 4
    prune_fraction: float = 0.0
    grad_clip: float = 1.0
    head_init: str = "shared"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ValueError("betas must be two values in [0, 1)")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.batch_size < 1 or self.steps_per_task < 0:
            raise ValueError("batch_size must be positive and steps_per_task non-negative")
        if self.lam < 0 or self.alpha < 0 or self.weight_decay < 0:
            raise ValueError("loss weights and weight_decay must be non-negative")
        if self.replay_capacity < 0 or self.replay_every < 1:
            raise ValueError("replay_capacity must be >= 0 and replay_every >= 1")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ValueError("prune_fraction must lie in [0, 1)")
        if self.head_init not in ("shared", "base", "random"):
            raise ValueError("head_init must be 'shared', 'base' or 'random'")


@dataclass
class StepLoss:
    total: tc.Tensor
    l_ntp: float
    l_aux: float
    l_exc: float
    l_spe: float
    type_counts: dict[str, int]


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_ratio`` of steps, then constant."""
    warm = int(math.ceil(cfg.warmup_ratio * total_steps))
    if warm and step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr


def _type_counts(routing) -> dict[str, int]:
    counts = {"new": 0, "old": 0, "ambiguous": 0}
    for r in routing.values():
        counts["new"] += int(np.count_nonzero(r.types == NEW))
        counts["old"] += int(np.count_nonzero(r.types == OLD))
        counts["ambiguous"] += int(np.count_nonzero(r.types == AMBIGUOUS))
    return counts


def batch_loss(model: Model, tokens, labels, head: int, t: int, cfg: TrainConfig, policy) -> StepLoss:
    """Combined objective for one batch; must be called inside an active Graph."""
    out = model.forward(tokens, head, policy, current_task=t)
    l_ntp = tc.cross_entropy(out.logits, np.asarray(labels).reshape(-1))
    zero = tc.Tensor(0.0)
    l_aux = zero
    l_exc = zero
    l_spe = zero
    sites = list(out.routing.values())
    if cfg.aux_enabled and sites:
        l_aux = tc.scale(sum((site_load_balance(r) for r in sites[1:]), site_load_balance(sites[0])), 1.0 / len(sites))
    if cfg.rsr_enabled and t > 1 and sites:
        terms = [rsr_terms(r) for r in sites]
        terms = [x for x in terms if x is not None]
        if terms:
            l_exc = tc.scale(sum((tc.mean(e) for e, _ in terms[1:]), tc.mean(terms[0][0])), 1.0 / len(terms))
            l_spe = tc.scale(sum((tc.mean(s) for _, s in terms[1:]), tc.mean(terms[0][1])), 1.0 / len(terms))
    total = combine_losses(l_ntp, l_aux, l_exc, l_spe, cfg.lam, cfg.alpha)
    return StepLoss(total, l_ntp.item(), l_aux.item(), l_exc.item(), l_spe.item(), _type_counts(out.routing))


def snap_to_f32(model: Model, names=None) -> None:
    """Round tensors (and optimizer moments) to float32-representable values so checkpoints round-trip exactly."""
    for name, t in model.named_tensors().items():
        if names is None or name in names:
            t.data[...] = t.data.astype(np.float32).astype(np.float64)
    if model.optimizer is not None:
        for arr in (*model.optimizer.m.values(), *model.optimizer.v.values()):
            arr[...] = arr.astype(np.float32).astype(np.float64)


def train_task(
    model: Model,
    dataset: TaskDataset,
    t: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    policy=None,
    replay: ReplayBuffer | None = None,
    on_step: Callable[[int, Model], None] | None = None,
) -> list[dict]:
    """Optimize the newest task's parameters for ``cfg.steps_per_task`` minibatches.

    ``policy`` overrides the default routing guidance (TAG when enabled and
    ``t > 1``, free routing otherwise). Returns one log record per step.
    """
    if policy is None:
        policy = TAG_POLICY if (cfg.tag_enabled and t > 1) else FREE_POLICY
    params = model.trainable()
    opt = AdamW(params, betas=cfg.betas, weight_decay=cfg.weight_decay)
    model.optimizer = opt
    tokens, labels = dataset.train_tokens, dataset.train_labels
    n = len(tokens)
    order = rng.permutation(n)
    cursor = 0
    records: list[dict] = []
    steps = cfg.steps_per_task
    for step in range(steps):
        if cursor + cfg.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        dump = {"task": t, "step": step, "indices": idx.tolist(), "tokens": tokens[idx].tolist()}
        try:
            with Graph() as g:
                sl = batch_loss(model, tokens[idx], labels[idx], t, t, cfg, policy)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite value at task {t} step {step}: {exc}", dump) from exc
        total = sl.total.item()
        if not math.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at task {t} step {step}", dump)
        grads = backward(g, sl.total)
        clip_grad_norm(grads, cfg.grad_clip)
        lr = lr_at(step, steps, cfg)
        opt.step(grads, lr)
        records.append(
            {
                "task": t,
                "step": step,
                "l_ntp": sl.l_ntp,
                "l_aux": sl.l_aux,
                "l_exc": sl.l_exc,
                "l_spe": sl.l_spe,
                "total": total,
                "type_counts": sl.type_counts,
            }
        )
        if replay is not None and len(replay) and (step + 1) % cfg.replay_every == 0:
            _replay_step(model, replay, t, cfg, rng, policy, opt, lr)
        if on_step is not None:
            on_step(step + 1, model)
    return records


def _replay_step(model, replay, t, cfg, rng, policy, opt, lr) -> None:
    toks, labs, tasks = replay.sample(cfg.batch_size, rng)
    with Graph() as g:
        parts = []
        for s in np.unique(tasks):
            sel = tasks == s
            sl = batch_loss(model, toks[sel], labs[sel], int(s), t, cfg, policy)
            parts.append(tc.scale(sl.total, sel.sum() / len(tasks)))
        loss = parts[0]
        for p in parts[1:]:
            loss = loss + p
    if not math.isfinite(loss.item()):
        raise TrainingDiverged(f"non-finite replay loss at task {t}")
    grads = backward(g, loss)
    clip_grad_norm(grads, cfg.grad_clip)
    opt.step(grads, lr)


def predict(model: Model, tokens, task: int, batch: int = 250) -> np.ndarray:
    """Argmax class per token, (N, S). Routing is unconstrained at inference."""
    tokens = np.asarray(tokens)
    outs = []
    for i in range(0, len(tokens), batch):
        chunk = tokens[i : i + batch]
        logits = model.forward(chunk, task).logits.data
        outs.append(np.argmax(logits, axis=1).reshape(chunk.shape))
    return np.concatenate(outs) if outs else np.zeros((0, tokens.shape[1] if tokens.ndim == 2 else 0), int)


def count_correct(model: Model, tokens, labels, task: int) -> tuple[int, int]:
    pred = predict(model, tokens, task)
    labels = np.asarray(labels)
    return int(np.count_nonzero(pred == labels)), int(labels.size)


def evaluate(model: Model, dataset: TaskDataset, t: int, split: str = "test") -> float:
    """Fraction of tokens whose argmax class matches the label."""
    toks, labs = dataset.split(split)
    correct, total = count_correct(model, toks, labs, t)
    return correct / total if total else 0.0


def activation_counts(model: Model, tokens, task: int, batch: int = 250) -> dict[str, np.ndarray]:
    """Per-site count of tokens that gave each expert a nonzero weight."""
    counts = {site: np.zeros(reg.n_experts) for site, reg in model.registries.items()}
    for i in range(0, len(tokens), batch):
        out = model.forward(tokens[i : i + batch], task)
        for site, r in out.routing.items():
            counts[site] += r.selected.sum(axis=0)
    return counts


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    records: list[EvalRecord] = field(default_factory=list)
    logs: list[dict] = field(default_factory=list)
    model: Model | None = None


def task_rng(seed: int, t: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, t, purpose]))


def start_task(model: Model, t: int, cfg: TrainConfig) -> None:
    model.expand_for_task(t, task_rng(cfg.seed, t, 1), head_init=cfg.head_init)


def finish_task(model: Model, dataset: TaskDataset, t: int, cfg: TrainConfig, replay: ReplayBuffer | None) -> None:
    """Post-training bookkeeping: optional pruning, replay push, f32 snapping."""
    trained = set(model.trainable())
    if cfg.prune_fraction > 0:
        counts = activation_counts(model, dataset.train_tokens[:500], t)
        for site, reg in model.registries.items():
            prune_experts(reg, cfg.prune_fraction, counts[site])
    if replay is not None:
        rng = task_rng(cfg.seed, t, 3)
        for x, y in zip(dataset.train_tokens, dataset.train_labels):
            replay.push(x, y, t, rng)
    snap_to_f32(model, trained | {n for n, tt in model.named_tensors().items() if tt.requires_grad})


def run_sequence(
    model: Model,
    stream: list[TaskDataset],
    cfg: TrainConfig,
    on_task_end: Callable[[int, Model, AccuracyMatrix], None] | None = None,
    start: int = 1,
    replay: ReplayBuffer | None = None,
) -> RunResult:
    """Train tasks ``start..T`` in order, filling one accuracy-matrix row after each.

    ``model`` must already hold tasks ``< start`` (a pretrained backbone when
    ``start == 1``). Rows for tasks before ``start`` are evaluated from the
    model as given.
    """
    n_tasks = len(stream)
    if n_tasks < 1:
        raise ValueError("empty task stream")
    if replay is None and cfg.replay_capacity > 0:
        replay = ReplayBuffer(cfg.replay_capacity)
    matrix = AccuracyMatrix(n_tasks)
    result = RunResult(matrix)
    for j in range(start, n_tasks + 1):
        ds = stream[j - 1]
        start_task(model, j, cfg)
        logs = train_task(model, ds, j, cfg, task_rng(cfg.seed, j, 2), replay=replay)
        finish_task(model, ds, j, cfg, replay)
        result.logs.extend(logs)
        for i in range(1, j + 1):
            c, n = count_correct(model, stream[i - 1].test_tokens, stream[i - 1].test_labels, i)
            result.records.append(EvalRecord(j, i, c, n))
            matrix.set(j, i, c / n)
        log.info("task %d done: row %s", j, [round(matrix.get(j, i), 4) for i in range(1, j + 1)])
        if on_task_end is not None:
            on_task_end(j, model, matrix)
    result.model = model
    return result


__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "RunResult",
    "lr_at",
    "batch_loss",
    "train_task",
    "evaluate",
    "predict",
    "count_correct",
    "activation_counts",
    "run_sequence",
    "start_task",
    "finish_task",
    "snap_to_f32",
]
