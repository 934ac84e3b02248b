"""Compare the compiled and numpy routing kernels, alone and inside one training step.

    python benchmarks/bench_routing.py [--tokens 512] [--repeat 50]
"""

import argparse
import statistics
import time

import numpy as np

from dymoe import kernels
from dymoe.config import RunConfig
from dymoe.experiment import build_base, build_stream
from dymoe.layer import TAG_POLICY
from dymoe.trainer import batch_loss, finish_task, start_task, task_rng, train_task
from dymoe.tensor import Graph, backward


def _time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_kernel(n_tokens, repeat):
    rng = np.random.default_rng(0)
    rows = []
    for n_old, n_new in ((4, 4), (12, 4), (28, 4)):
        logits = rng.normal(size=(n_tokens, n_old + n_new))
        args = (logits, n_old, 4, 0.2, 1e-9, TAG_POLICY)
        py = _time(lambda: kernels.py_route_kernel(*args), repeat)
        row = [n_old + n_new, py]
        if kernels.BACKEND == "cython":
            row.append(_time(lambda: kernels.route_kernel(*args), repeat))
        rows.append(row)
    return rows


def bench_step(repeat):
    """Share of one task-2 training step spent in the routing kernel."""
    cfg = RunConfig().with_train(steps_per_task=1)
    model, stream = build_base(cfg), build_stream(cfg)
    start_task(model, 1, cfg.train)
    train_task(model, stream[0], 1, cfg.train, task_rng(0, 1, 2))
    finish_task(model, stream[0], 1, cfg.train, None)
    start_task(model, 2, cfg.train)
    toks, labs = stream[1].train_tokens[:32], stream[1].train_labels[:32]

    def step():
        with Graph() as g:
            sl = batch_loss(model, toks, labs, 2, 2, cfg.train, TAG_POLICY)
        backward(g, sl.total)

    return _time(step, repeat)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--tokens", type=int, default=512)
    p.add_argument("--repeat", type=int, default=50)
    args = p.parse_args()
    print(f"backend: {kernels.BACKEND}")
    print(f"kernel, {args.tokens} tokens (median ms)")
    header = "experts  numpy" + ("  compiled  speedup" if kernels.BACKEND == "cython" else "")
    print(header)
    for row in bench_kernel(args.tokens, args.repeat):
        line = f"{row[0]:7d}  {1e3 * row[1]:5.3f}"
        if len(row) == 3:
            line += f"  {1e3 * row[2]:8.3f}  {row[1] / row[2]:6.1f}x"
        print(line)
    step = bench_step(max(3, args.repeat // 10))
    print(f"one task-2 training step (batch 32 x 16 tokens, 4 MoE sites): {1e3 * step:.1f} ms")


if __name__ == "__main__":
    main()
