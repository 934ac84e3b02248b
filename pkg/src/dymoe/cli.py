"""``dymoe`` command line: train, analyze, inspect, eval, export-data.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 training
divergence, 3 unreadable or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .metrics import TYPE_NAMES, routing_stats, summarize
from .taskgen import export_jsonl, load_jsonl
from .trainer import TrainingDiverged, count_correct

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
PRUNE_CHOICES = ("0", "1/8", "1/4")

log = logging.getLogger("dymoe")


def pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _setup_logging() -> None:
    name = os.environ.get("DYMOE_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise ConfigError("DYMOE_LOG_LEVEL", f"expected one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if args.no_tag:
        changes["tag_enabled"] = False
    if args.no_rsr:
        changes["rsr_enabled"] = False
    if args.no_aux:
        changes["aux_enabled"] = False
    if args.replay is not None:
        if args.replay < 0:
            raise ConfigError("--replay", "must be non-negative")
        changes["replay_capacity"] = args.replay
    if args.prune is not None:
        changes["prune_fraction"] = float(Fraction(args.prune))
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.with_train(**changes) if changes else cfg


def print_matrix(cfg: RunConfig, rows) -> None:
    print(f"config_hash {cfg.config_hash}")
    for j, row in enumerate(rows, start=1):
        print(f"after task {j}: " + " ".join(pct(x) for x in row))


def cmd_train(args) -> int:
    from .experiment import run_training

    cfg = _apply_overrides(load_config(args.config), args)
    try:
        result = run_training(cfg, args.out)
    except TrainingDiverged as exc:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "divergence.json").write_text(json.dumps({"error": str(exc), **exc.dump}, sort_keys=True) + "\n")
        log.error("%s", exc)
        return EXIT_DIVERGED
    print_matrix(cfg, result.matrix.rows())
    s = summarize(result.matrix)
    print(f"MFN {pct(s['mfn'])}  MAA {pct(s['maa'])}  BWT {pct(s['bwt'])}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import Strategy, curve_csv, two_task_experiment

    try:
        strategy = Strategy.parse(args.strategy)
    except ValueError as exc:
        raise ConfigError("--strategy", str(exc)) from None
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_train(seed=args.seed)
    try:
        points = two_task_experiment(cfg, strategy)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"curve_{strategy.value}"
    (out / f"{stem}.csv").write_text(curve_csv(points, strategy, cfg.train.seed))
    (out / f"{stem}.json").write_text(
        json.dumps({"config_hash": cfg.config_hash, "strategy": strategy.value, "seed": cfg.train.seed}, sort_keys=True) + "\n"
    )
    last = points[-1]
    print(f"{strategy.value}: step {last.step} task1 {pct(last.acc_task1)} task2 {pct(last.acc_task2)}")
    return EXIT_OK


def _load_data(path):
    try:
        return load_jsonl(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError("--data", f"cannot read {path}: {exc}") from None


def cmd_inspect(args) -> int:
    model, cfg, manifest = load_checkpoint(args.ckpt)
    data = _load_data(args.data)
    reached = manifest["task"]
    total = None
    for task, (tokens, _) in data.items():
        if task > reached or task < 1:
            continue
        out = model.forward(tokens, task)
        st = routing_stats(out.routing, model.registries)
        total = st if total is None else total.merge(st)
    if total is None:
        raise ConfigError("--data", f"no samples for tasks 1..{reached}")
    print(f"config_hash {manifest['config_hash']}  task {reached}")
    print("site expert owner activations")
    for site, counts in total.activation.items():
        owners = model.registries[site].owners
        for i, c in enumerate(counts):
            print(f"{site} {i} t{int(owners[i])} {int(c)}")
    print("token types: " + " ".join(f"{k}={total.type_hist[k]}" for k in TYPE_NAMES.values()))
    for site, mass in total.group_mass.items():
        share = mass / mass.sum() if mass.sum() else mass
        groups = [g.task for g in model.registries[site].groups]
        print(f"{site} gate mass: " + " ".join(f"t{t}={pct(m)}%" for t, m in zip(groups, share)))
    if args.out:
        Path(args.out).write_text(
            json.dumps(
                {
                    "config_hash": manifest["config_hash"],
                    "activation": {k: v.tolist() for k, v in total.activation.items()},
                    "group_mass": {k: v.tolist() for k, v in total.group_mass.items()},
                    "type_hist": total.type_hist,
                },
                sort_keys=True,
            )
            + "\n"
        )
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, manifest = load_checkpoint(args.ckpt)
    data = _load_data(args.data)
    reached = manifest["task"]
    accs = {}
    for task, (tokens, labels) in data.items():
        if 1 <= task <= reached:
            c, n = count_correct(model, tokens, labels, task)
            accs[task] = c / n
    if not accs:
        raise ConfigError("--data", f"no samples for tasks 1..{reached}")
    print(f"config_hash {manifest['config_hash']}  task {reached}")
    for task, a in accs.items():
        print(f"task {task}: {pct(a)}")
    print(f"mean {pct(float(np.mean(list(accs.values()))))}")
    return EXIT_OK


def cmd_export_data(args) -> int:
    from .experiment import build_stream

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_train(seed=args.seed)
    export_jsonl(build_stream(cfg), args.out, split=args.split)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dymoe", description="Dynamic mixture-of-LoRA-experts continual learner.")
    p.add_argument("--version", action="version", version=f"dymoe {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the task stream and write checkpoints, logs and metrics")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--no-tag", action="store_true", help="disable token assignment guidance")
    t.add_argument("--no-rsr", action="store_true", help="disable the exclusivity and specialization losses")
    t.add_argument("--no-aux", action="store_true", help="disable the load-balancing loss")
    t.add_argument("--replay", type=int, metavar="N", help="replay buffer capacity (0 = off)")
    t.add_argument("--prune", choices=PRUNE_CHOICES, help="fraction of each task's experts to prune")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="two-task masking experiment")
    a.add_argument("--config", required=True)
    a.add_argument("--strategy", required=True, help="baseline, only-new, mask-old or only-ambiguous")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("inspect", help="routing statistics of a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True, help="JSONL samples as written by export-data")
    i.add_argument("--out", help="also write the statistics as JSON")
    i.set_defaults(func=cmd_inspect)

    e = sub.add_parser("eval", help="per-task accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-data", help="write a config's task data as JSONL")
    x.add_argument("--config", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--split", choices=("train", "test"), default="test")
    x.add_argument("--seed", type=int)
    x.set_defaults(func=cmd_export_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
