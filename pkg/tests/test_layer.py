import math

import numpy as np
import pytest
from conftest import make_registry

from dymoe import tensor as tc
from dymoe.kernels import AMBIGUOUS, FIRST_TASK, NEW, OLD
from dymoe.layer import (
    FREE_POLICY,
    TAG_POLICY,
    ExpertRegistry,
    MoeConfig,
    expand_for_task,
    forward,
    moe_apply,
    prune_experts,
    route,
    route_batch,
)
from dymoe.tensor import Tensor


def test_single_expert_gets_all_weight():
    reg = make_registry([[0.3, -1.0]], [1])
    d = route(np.array([1.0, 2.0]), reg, MoeConfig(top_k=4, experts_per_task=1), False, 1)
    np.testing.assert_array_equal(d.weights, [1.0])


def test_equal_logits_split_evenly():
    reg = make_registry([[0.0], [0.0]], [2])
    d = route(np.array([1.0]), reg, MoeConfig(top_k=2, experts_per_task=2), False, 1)
    np.testing.assert_array_equal(d.weights, [0.5, 0.5])


def test_tie_keeps_lowest_index():
    # s = [ln 2, 0, 0], K = 2: the tie between experts 1 and 2 goes to expert 1
    reg = make_registry([[math.log(2)], [0.0], [0.0]], [3])
    d = route(np.array([1.0]), reg, MoeConfig(top_k=2, experts_per_task=3), False, 1)
    np.testing.assert_array_equal(d.selected, [0, 1])
    assert abs(d.weights[0] - 2 / 3) < 1e-12
    assert abs(d.weights[1] - 1 / 3) < 1e-12
    assert d.weights[2] == 0.0


def test_first_task_tokens_are_typed_first_task():
    reg = make_registry([[1.0], [2.0]], [2])
    d = route(np.array([1.0]), reg, MoeConfig(top_k=2, experts_per_task=2), True, 1)
    assert d.token_type == FIRST_TASK


def test_tag_masks_new_group_for_old_token():
    # old logits [1, 2], new [0.5]: d_rel = 0.75, old-dominant
    reg = make_registry([[1.0], [2.0], [0.5]], [2, 1])
    d = route(np.array([1.0]), reg, MoeConfig(top_k=3), True, 2)
    assert d.token_type == OLD
    assert np.isneginf(d.masked_logits[2])
    assert d.weights[2] == 0.0
    assert abs(d.weights.sum() - 1.0) < 1e-12


def test_tag_masks_old_group_for_new_token():
    reg = make_registry([[1.0], [3.0]], [1, 1])
    d = route(np.array([1.0]), reg, MoeConfig(top_k=2), True, 2)
    assert d.token_type == NEW
    np.testing.assert_array_equal(d.weights, [0.0, 1.0])


def test_ambiguous_token_stays_on_old_group():
    reg = make_registry([[1.0], [1.1]], [1, 1])
    d = route(np.array([1.0]), reg, MoeConfig(top_k=2), True, 2)
    assert d.token_type == AMBIGUOUS
    np.testing.assert_array_equal(d.weights, [1.0, 0.0])


def test_expand_appends_contiguous_groups_and_freezes():
    reg = ExpertRegistry(5, 3, 2)
    cfg = MoeConfig(experts_per_task=4)
    rng = np.random.default_rng(0)
    expand_for_task(reg, cfg, 1, rng)
    assert reg.n_experts == 4 and reg.group_index[1] == range(0, 4)
    old = reg.router_weight.copy()
    expand_for_task(reg, cfg, 2, rng)
    assert reg.n_experts == 8 and reg.group_index[2] == range(4, 8)
    assert reg.router_frozen_rows == {0, 1, 2, 3}
    assert reg.router_weight[:4].tobytes() == old.tobytes()
    assert all(e.frozen for e in reg.experts[:4]) and not any(e.frozen for e in reg.experts[4:])


def test_expand_out_of_order_raises():
    reg = ExpertRegistry(5, 3, 2)
    with pytest.raises(ValueError):
        expand_for_task(reg, MoeConfig(), 2, np.random.default_rng(0))


def test_prune_drops_least_used():
    reg = make_registry(np.zeros((8, 2)), [8])
    prune_experts(reg, 0.25, [9, 1, 8, 2, 7, 3, 6, 4])
    assert reg.n_experts == 6
    # surviving experts are the original 0, 2, 4, 5, 6, 7
    kept = [0, 2, 4, 5, 6, 7]
    full = make_registry(np.zeros((8, 2)), [8])
    np.testing.assert_array_equal(reg.groups[0].down.data, full.groups[0].down.data[kept])


def test_prune_ties_drop_lowest_index():
    reg = make_registry(np.zeros((8, 2)), [8])
    full = make_registry(np.zeros((8, 2)), [8])
    prune_experts(reg, 1 / 8, np.ones(8))
    np.testing.assert_array_equal(reg.groups[0].down.data, full.groups[0].down.data[1:])


def test_prune_zero_is_noop_and_emptying_raises():
    reg = make_registry(np.zeros((2, 2)), [2])
    prune_experts(reg, 0.0, [1, 2])
    assert reg.n_experts == 2
    with pytest.raises(ValueError):
        prune_experts(reg, 1.0, [1, 2])
    with pytest.raises(ValueError):
        prune_experts(reg, 0.5, [1, 2, 3])


def _random_setup(seed, groups=(4, 4), d_in=6, d_out=5):
    rng = np.random.default_rng(seed)
    reg = make_registry(rng.normal(size=(sum(groups), d_in)), list(groups), d_out=d_out, seed=seed)
    for g in reg.groups:
        g.up.data[...] = rng.normal(size=g.up.shape)
    w0 = rng.normal(size=(d_out, d_in))
    b0 = rng.normal(size=d_out)
    return rng, reg, w0, b0


def test_zero_up_matrices_give_base_output():
    rng = np.random.default_rng(0)
    reg = make_registry(rng.normal(size=(4, 6)), [4], d_out=5)
    w0 = rng.normal(size=(5, 6))
    h = rng.normal(size=6)
    d = route(h, reg, MoeConfig(), False, 1)
    np.testing.assert_allclose(forward(h, d, reg, w0), w0 @ h, atol=1e-14)


def test_scaled_identity_expert():
    reg = ExpertRegistry(3, 3, 3)
    expand_for_task(reg, MoeConfig(experts_per_task=1, rank=3), 1, np.random.default_rng(0))
    reg.groups[0].down.data[0] = np.eye(3)
    reg.groups[0].up.data[0] = 0.5 * np.eye(3)
    w0 = np.arange(9.0).reshape(3, 3)
    h = np.array([1.0, -2.0, 0.5])
    d = route(h, reg, MoeConfig(experts_per_task=1, rank=3), False, 1)
    np.testing.assert_allclose(forward(h, d, reg, w0), w0 @ h + 0.5 * h, atol=1e-14)


def test_two_experts_half_weight_each():
    reg = ExpertRegistry(2, 2, 2)
    expand_for_task(reg, MoeConfig(experts_per_task=2), 1, np.random.default_rng(0))
    g = reg.groups[0]
    g.router.data[...] = 0.0
    g.down.data[...] = np.eye(2)
    g.up.data[0] = np.diag([1.0, 2.0])
    g.up.data[1] = np.diag([-3.0, 4.0])
    h = np.array([1.0, 1.0])
    d = route(h, reg, MoeConfig(top_k=2, experts_per_task=2), False, 1)
    u, v = np.array([1.0, 2.0]), np.array([-3.0, 4.0])
    np.testing.assert_allclose(forward(h, d, reg, np.zeros((2, 2))), 0.5 * u + 0.5 * v, atol=1e-14)


def test_batched_path_matches_single_token_path():
    for seed in range(5):
        rng, reg, w0, b0 = _random_setup(seed)
        cfg = MoeConfig(top_k=3)
        h = rng.normal(size=(7, 6))
        r = route_batch(Tensor(h), reg, cfg, TAG_POLICY, current_task=2)
        out = moe_apply(Tensor(h), r, reg, Tensor(w0), Tensor(b0)).data
        for n in range(7):
            d = route(h[n], reg, cfg, True, 2)
            np.testing.assert_array_equal(r.weights.data[n] > 0, d.weights > 0)
            np.testing.assert_allclose(r.weights.data[n], d.weights, atol=1e-15)
            np.testing.assert_allclose(out[n], forward(h[n], d, reg, w0, b0), atol=1e-12)


def test_gradient_only_reaches_unfrozen_experts():
    rng, reg, w0, b0 = _random_setup(7)
    h = Tensor(rng.normal(size=(10, 6)))
    with tc.Graph() as g:
        r = route_batch(h, reg, MoeConfig(top_k=4), FREE_POLICY, current_task=2)
        loss = tc.tsum(moe_apply(h, r, reg, Tensor(w0), Tensor(b0)))
    grads = tc.backward(g, loss)
    old, new = reg.groups
    assert all(t not in grads for t in old.tensors().values())
    assert all(t in grads for t in new.tensors().values())


def test_tag_never_leaves_a_token_without_experts():
    # TAG always leaves the old group available, so a fully masked row cannot arise
    rng, reg, _, _ = _random_setup(3)
    r = route_batch(Tensor(rng.normal(size=(50, 6))), reg, MoeConfig(top_k=2), TAG_POLICY, current_task=2)
    assert r.selected.any(axis=1).all()
