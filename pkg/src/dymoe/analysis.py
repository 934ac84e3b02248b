"""Two-task masking experiments: which token types may reach the new experts while task 2 trains."""

from __future__ import annotations

import copy
import csv
import dataclasses
import enum
import io
from dataclasses import dataclass

import numpy as np

from .backbone import Model
from .config import RunConfig
from .experiment import build_base, build_stream
from .kernels import AMBIGUOUS, BOTH, FIRST_TASK, NEW, OLD, OLD_ONLY
from .taskgen import TaskDataset
from .trainer import count_correct, finish_task, start_task, task_rng, train_task


class Strategy(enum.Enum):
    BASELINE = "baseline"
    ONLY_NEW = "only-new"
    MASK_OLD = "mask-old"
    ONLY_AMBIGUOUS = "only-ambiguous"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        try:
            return cls(name)
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown strategy {name!r}; choose from {choices}") from None


def strategy_mask(token_type: int, strategy: Strategy) -> tuple[bool, bool]:
    """(may use old group, may use new group) for one token under ``strategy``."""
    t = int(token_type)
    if strategy is Strategy.BASELINE or t == FIRST_TASK:
        return True, True
    if strategy is Strategy.ONLY_NEW:
        return True, t == NEW
    if strategy is Strategy.MASK_OLD:
        return True, t != OLD
    if strategy is Strategy.ONLY_AMBIGUOUS:
        return True, t == AMBIGUOUS
    raise ValueError(f"unknown strategy {strategy!r}")


def strategy_policy(strategy: Strategy) -> np.ndarray:
    """Per-token-type routing policy table consumed by the routing kernel."""
    pol = np.full(4, BOTH, dtype=np.int8)
    for t in (FIRST_TASK, NEW, OLD, AMBIGUOUS):
        _, new_ok = strategy_mask(t, strategy)
        pol[t] = BOTH if new_ok else OLD_ONLY
    return pol


@dataclass(frozen=True)
class CurvePoint:
    step: int
    acc_task1: float
    acc_task2: float


@dataclass
class SharedStart:
    """Model after task 1, reused by every strategy of the same config."""

    model: Model
    stream: list[TaskDataset]


def analysis_config(cfg: RunConfig) -> RunConfig:
    """The controlled experiment studies masking alone: two tasks, no RSR."""
    tasks = cfg.tasks[:2]
    if len(tasks) < 2:
        raise ValueError("the two-task experiment needs at least two tasks in the config")
    return dataclasses.replace(cfg, tasks=tasks, train=dataclasses.replace(cfg.train, rsr_enabled=False))


def shared_start(cfg: RunConfig) -> SharedStart:
    cfg = analysis_config(cfg)
    model = build_base(cfg)
    stream = build_stream(cfg)
    start_task(model, 1, cfg.train)
    train_task(model, stream[0], 1, cfg.train, task_rng(cfg.train.seed, 1, 2))
    finish_task(model, stream[0], 1, cfg.train, None)
    return SharedStart(model, stream)


def _acc(model: Model, ds: TaskDataset, task: int, n: int) -> float:
    c, total = count_correct(model, ds.test_tokens[:n], ds.test_labels[:n], task)
    return c / total


def two_task_experiment(
    cfg: RunConfig, strategy: Strategy, eval_every: int | None = None, start: SharedStart | None = None
) -> list[CurvePoint]:
    """Train task 2 under ``strategy`` from the shared task-1 model, tracking both accuracies."""
    cfg = analysis_config(cfg)
    every = eval_every or cfg.analysis.eval_every
    n_eval = cfg.analysis.eval_samples
    if start is None:
        start = shared_start(cfg)
    model = copy.deepcopy(start.model)
    ds1, ds2 = start.stream
    start_task(model, 2, cfg.train)
    points = [CurvePoint(0, _acc(model, ds1, 1, n_eval), _acc(model, ds2, 2, n_eval))]

    def on_step(step, m):
        if step % every == 0 or step == cfg.train.steps_per_task:
            points.append(CurvePoint(step, _acc(m, ds1, 1, n_eval), _acc(m, ds2, 2, n_eval)))

    train_task(model, ds2, 2, cfg.train, task_rng(cfg.train.seed, 2, 2), policy=strategy_policy(strategy), on_step=on_step)
    return points


def curve_csv(points: list[CurvePoint], strategy: Strategy, seed: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "acc_task1", "acc_task2", "strategy", "seed"])
    for p in points:
        w.writerow([p.step, repr(p.acc_task1), repr(p.acc_task2), strategy.value, seed])
    return buf.getvalue()


__all__ = [
    "Strategy",
    "CurvePoint",
    "SharedStart",
    "strategy_mask",
    "strategy_policy",
    "analysis_config",
    "shared_start",
    "two_task_experiment",
    "curve_csv",
]
