import hashlib

import numpy as np
import pytest
from conftest import tiny_config

from dymoe import tensor as tc
from dymoe.backbone import BackboneConfig, Model
from dymoe.experiment import build_base, build_stream, run_training
from dymoe.kernels import OLD
from dymoe.layer import TAG_POLICY, MoeConfig
from dymoe.taskgen import TaskDataset
from dymoe.trainer import (
    TrainConfig,
    TrainingDiverged,
    batch_loss,
    evaluate,
    finish_task,
    lr_at,
    run_sequence,
    start_task,
    task_rng,
    train_task,
)


def _hashes(model):
    return {n: hashlib.sha256(t.data.tobytes()).hexdigest() for n, t in model.named_tensors().items()}


def _started(cfg, t_max=1):
    """Base model with tasks < t_max trained and task t_max expanded."""
    model, stream = build_base(cfg), build_stream(cfg)
    for t in range(1, t_max):
        start_task(model, t, cfg.train)
        train_task(model, stream[t - 1], t, cfg.train, task_rng(cfg.train.seed, t, 2))
        finish_task(model, stream[t - 1], t, cfg.train, None)
    start_task(model, t_max, cfg.train)
    return model, stream


def test_config_validation():
    for bad in (dict(lr=0.0), dict(warmup_ratio=1.0), dict(batch_size=0), dict(lam=-1.0), dict(head_init="x")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_warmup_is_linear_then_constant():
    cfg = TrainConfig(lr=1.0, warmup_ratio=0.1)
    assert [lr_at(s, 100, cfg) for s in range(10)] == [(s + 1) / 10 for s in range(10)]
    assert lr_at(10, 100, cfg) == 1.0 and lr_at(99, 100, cfg) == 1.0
    assert lr_at(0, 100, TrainConfig(lr=0.5, warmup_ratio=0.0)) == 0.5


def test_zero_steps_leave_the_model_unchanged():
    cfg = tiny_config(steps=0)
    model, stream = _started(cfg)
    before = _hashes(model)
    logs = train_task(model, stream[0], 1, cfg.train, task_rng(0, 1, 2))
    assert logs == [] and _hashes(model) == before


def test_frozen_tensors_untouched_by_training():
    cfg = tiny_config(steps=15)
    model, stream = _started(cfg, t_max=2)
    before = _hashes(model)
    trainable = set(model.trainable())
    train_task(model, stream[1], 2, cfg.train, task_rng(0, 2, 2))
    after = _hashes(model)
    assert all(after[n] == h for n, h in before.items() if n not in trainable)
    assert any(after[n] != before[n] for n in trainable)
    assert trainable == {n for n in model.named_tensors() if model.owner_of(n) == 2}


def test_task_one_log_has_no_typed_tokens():
    cfg = tiny_config(steps=5)
    model, stream = _started(cfg)
    logs = train_task(model, stream[0], 1, cfg.train, task_rng(0, 1, 2))
    assert len(logs) == 5
    assert all(r["type_counts"] == {"new": 0, "old": 0, "ambiguous": 0} for r in logs)
    assert all(r["l_exc"] == 0.0 and r["l_spe"] == 0.0 for r in logs)


def test_logged_total_is_exact_readdition():
    cfg = tiny_config(steps=10, lam=0.37, alpha=0.21)
    model, stream = _started(cfg, t_max=2)
    logs = train_task(model, stream[1], 2, cfg.train, task_rng(0, 2, 2))
    for r in logs:
        assert r["total"] == r["l_ntp"] + 0.37 * r["l_aux"] + 0.21 * (r["l_exc"] + r["l_spe"])
    assert any(sum(r["type_counts"].values()) > 0 for r in logs)


def test_optimizer_state_covers_exactly_the_trainable_set():
    cfg = tiny_config(steps=3)
    model, stream = _started(cfg, t_max=2)
    train_task(model, stream[1], 2, cfg.train, task_rng(0, 2, 2))
    assert set(model.optimizer.params) == set(model.trainable())
    assert all(model.owner_of(n) == 2 for n in model.optimizer.params)


def test_forced_old_tokens_give_no_gradient_to_new_router_rows():
    cfg = tiny_config()
    model, stream = _started(cfg, t_max=2)
    # push every old router row far above the new ones so every token is typed Old
    for reg in model.registries.values():
        old = reg.groups[0]
        old.router.data[...] = 50.0 * np.sign(np.random.default_rng(0).normal(size=old.router.shape))
    probe = TrainConfig(aux_enabled=False, rsr_enabled=False)
    toks, labs = stream[1].train_tokens[:8], stream[1].train_labels[:8]
    with tc.Graph() as g:
        sl = batch_loss(model, toks, labs, 2, 2, probe, TAG_POLICY)
    out = model.forward(toks, 2, TAG_POLICY)
    assert all((r.types == OLD).all() for r in out.routing.values())
    grads = tc.backward(g, sl.total)
    for reg in model.registries.values():
        new = reg.groups[-1]
        for t in new.tensors().values():
            assert t not in grads or not np.any(grads[t])


def test_random_head_scores_chance():
    # untrained random head, 4 classes, 500 x 16 uniform tokens
    cfg = BackboneConfig()
    rng = np.random.default_rng(0)
    model = Model(cfg, MoeConfig(), rng)
    model.expand_for_task(1, rng, head_init="random")
    toks = rng.integers(0, cfg.vocab_size, size=(500, cfg.seq_len))
    labs = rng.integers(0, 4, size=(500, cfg.seq_len))
    ds = TaskDataset(1, toks[:0], labs[:0], toks, labs)
    acc = evaluate(model, ds, 1)
    assert abs(acc - 0.25) <= 0.03
    assert evaluate(model, ds, 1) == acc


def test_memorizer_scores_one_on_its_training_set():
    cfg = tiny_config(steps=400, lr=3e-2, head_init="random", batch_size=4)
    model, stream = _started(cfg)
    toks, labs = stream[0].train_tokens[:4], stream[0].train_labels[:4]
    small = TaskDataset(1, toks, labs, toks, labs)
    train_task(model, small, 1, cfg.train, task_rng(0, 1, 2))
    assert evaluate(model, small, 1, split="train") == 1.0


def test_single_task_stream_gives_one_by_one_matrix():
    cfg = tiny_config(n_tasks=1, steps=5)
    res = run_sequence(build_base(cfg), build_stream(cfg), cfg.train)
    assert res.matrix.n_tasks == 1 and res.matrix.is_complete()


def test_rerun_is_identical(tmp_path):
    cfg = tiny_config(steps=8)
    a = run_training(cfg, tmp_path / "a")
    b = run_training(cfg, tmp_path / "b")
    assert a.matrix.rows() == b.matrix.rows()
    assert (tmp_path / "a" / "steps.jsonl").read_bytes() == (tmp_path / "b" / "steps.jsonl").read_bytes()
    assert len(a.matrix.rows()) == 2 and [len(r) for r in a.matrix.rows()] == [1, 2]


def test_divergence_raises_with_a_dump():
    cfg = tiny_config(steps=2)
    model, stream = _started(cfg)
    for t in model.trainable().values():
        t.data[...] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train_task(model, stream[0], 1, cfg.train, task_rng(0, 1, 2))
    assert err.value.dump["task"] == 1 and "tokens" in err.value.dump


def test_replay_runs_and_mixes_old_tasks():
    cfg = tiny_config(steps=8, replay_capacity=20, replay_every=2)
    res = run_training(cfg)
    assert res.matrix.is_complete()


def test_pruning_shrinks_each_group():
    cfg = tiny_config(steps=4, prune_fraction=0.5)
    res = run_training(cfg)
    for reg in res.model.registries.values():
        assert [g.size for g in reg.groups] == [1, 1]
