"""End-to-end runs from a RunConfig: pretrain the base, train the stream, write artifacts."""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

from .backbone import Model, pretrain_base
from .checkpoint import save_checkpoint
from .config import RunConfig
from .metrics import AccuracyMatrix, metrics_csv, summarize
from .taskgen import TaskDataset, generate_base_task, generate_stream
from .trainer import RunResult, run_sequence

log = logging.getLogger(__name__)

_BASE_CACHE: dict[str, Model] = {}


def _base_key(cfg: RunConfig) -> str:
    return json.dumps(
        {
            "backbone": cfg.to_dict()["backbone"],
            "moe": cfg.to_dict()["moe"],
            "layout": cfg.to_dict()["layout"],
            "pretrain": cfg.to_dict()["pretrain"],
            "seed": cfg.train.seed,
        },
        sort_keys=True,
    )


def build_base(cfg: RunConfig, cache: bool = True) -> Model:
    """Pretrained, frozen backbone for ``cfg``; a fresh copy on every call."""
    key = _base_key(cfg)
    if key not in _BASE_CACHE:
        p = cfg.pretrain
        data = generate_base_task(cfg.train.seed, cfg.layout, n_train=p.n_train, n_test=1)
        model = pretrain_base(cfg.backbone, cfg.moe, data, p.steps, cfg.train.seed, lr=p.lr, batch_size=p.batch_size)
        if not cache:
            return model
        _BASE_CACHE[key] = model
    return copy.deepcopy(_BASE_CACHE[key])


def build_stream(cfg: RunConfig) -> list[TaskDataset]:
    return generate_stream(cfg.train.seed, list(cfg.tasks), cfg.layout)


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.config_hash}-s{cfg.train.seed}"


def metric_rows(cfg: RunConfig, matrix: AccuracyMatrix) -> list[tuple[str, str, float]]:
    rid = run_id(cfg)
    return [(rid, name, value) for name, value in summarize(matrix).items()]


def write_jsonl(path: Path, records, config_hash: str) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"config_hash": config_hash, **rec}, sort_keys=True) + "\n")


def run_training(cfg: RunConfig, out_dir=None) -> RunResult:
    """Train every task in ``cfg``; with ``out_dir`` also write checkpoints, logs, matrix and metrics."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.canonical_json() + "\n")

    def on_task_end(j, model, matrix):
        if out is not None:
            save_checkpoint(model, out / "checkpoints" / f"task{j}", cfg, j)

    model = build_base(cfg)
    stream = build_stream(cfg)
    result = run_sequence(model, stream, cfg.train, on_task_end=on_task_end)
    if out is not None:
        h = cfg.config_hash
        write_jsonl(out / "steps.jsonl", result.logs, h)
        write_jsonl(out / "eval_log.jsonl", (r.__dict__ for r in result.records), h)
        (out / "matrix.json").write_text(result.matrix.to_json(h) + "\n")
        (out / "metrics.csv").write_text(metrics_csv(metric_rows(cfg, result.matrix)))
    return result


__all__ = ["build_base", "build_stream", "run_training", "run_id", "metric_rows"]
