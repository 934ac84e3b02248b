import numpy as np
import pytest

from dymoe.layer import ExpertRegistry, MoeConfig, expand_for_task


def make_registry(router_rows, groups, d_in=None, d_out=3, rank=2, seed=0, top_k=4, tau=0.2):
    """Registry whose router matrix equals ``router_rows``, split into task groups of the given sizes."""
    router_rows = np.asarray(router_rows, dtype=np.float64)
    d_in = router_rows.shape[1] if d_in is None else d_in
    rng = np.random.default_rng(seed)
    reg = ExpertRegistry(d_in, d_out, rank, name="site")
    start = 0
    for t, n in enumerate(groups, start=1):
        cfg = MoeConfig(top_k=top_k, experts_per_task=n, rank=rank, tau=tau)
        expand_for_task(reg, cfg, t, rng)
        reg.groups[-1].router.data[...] = router_rows[start : start + n]
        start += n
    return reg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(n_tasks=2, steps=20, seed=0, **train):
    """A seconds-scale RunConfig: 16-token vocabulary, one layer, short tasks."""
    from dymoe.backbone import BackboneConfig
    from dymoe.config import PretrainConfig, RunConfig
    from dymoe.taskgen import StreamLayout, default_specs
    from dymoe.trainer import TrainConfig

    return RunConfig(
        backbone=BackboneConfig(vocab_size=16, d_model=8, n_heads=2, n_layers=1, seq_len=4, d_ff=8, n_classes=4),
        moe=MoeConfig(top_k=2, experts_per_task=2, rank=2),
        train=TrainConfig(**{"steps_per_task": steps, "batch_size": 8, "seed": seed, **train}),
        layout=StreamLayout(vocab_size=16, seq_len=4, n_classes=4, n_shared=4, private_size=3),
        tasks=tuple(default_specs(n_tasks, n_train=64, n_test=40)),
        pretrain=PretrainConfig(steps=20, n_train=200),
    )
