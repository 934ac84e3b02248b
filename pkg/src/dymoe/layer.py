"""Dynamic mixture of low-rank experts on top of a frozen linear map.

Each task appends a contiguous group of experts (and the matching router rows)
to an :class:`ExpertRegistry`; earlier groups are frozen at that moment. A
token's output is the frozen base projection plus the routing-weighted sum of
its top-K experts' low-rank updates.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .kernels import AMBIGUOUS, BOTH, FIRST_TASK, NEW, NEW_ONLY, OLD, OLD_ONLY, route_kernel
from .tensor import Tensor

# token type -> which groups it may route to (indexed by FIRST_TASK, NEW, OLD, AMBIGUOUS)
FREE_POLICY = np.array([BOTH, BOTH, BOTH, BOTH], dtype=np.int8)
TAG_POLICY = np.array([BOTH, NEW_ONLY, OLD_ONLY, OLD_ONLY], dtype=np.int8)


@dataclass(frozen=True)
class MoeConfig:
    top_k: int = 4
    experts_per_task: int = 4
    rank: int = 2
    tau: float = 0.2
    epsilon: float = 1e-9
    router_init_std: float = 0.02

    def __post_init__(self):
        for name in ("top_k", "experts_per_task", "rank"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.router_init_std < 0:
            raise ValueError("router_init_std must be non-negative")


@dataclass
class ExpertGroup:
    """Experts added for one task, stored stacked: down (n, r, d_in), up (n, d_out, r)."""

    task: int
    down: Tensor
    up: Tensor
    router: Tensor
    frozen: bool = False

    @property
    def size(self) -> int:
        return self.router.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"down": self.down, "up": self.up, "router": self.router}

    def freeze(self) -> None:
        self.frozen = True
        for t in self.tensors().values():
            t.requires_grad = False


@dataclass
class LoraExpert:
    """Read-only view of one expert inside a group."""

    down: np.ndarray
    up: np.ndarray
    rank: int
    owner_task: int
    frozen: bool


class ExpertRegistry:
    def __init__(self, d_in: int, d_out: int, rank: int, name: str = ""):
        self.d_in = d_in
        self.d_out = d_out
        self.rank = rank
        self.name = name
        self.groups: list[ExpertGroup] = []

    def __len__(self) -> int:
        return self.n_experts

    @property
    def n_experts(self) -> int:
        return sum(g.size for g in self.groups)

    @property
    def tasks(self) -> list[int]:
        return [g.task for g in self.groups]

    @property
    def last_task(self) -> int:
        return self.groups[-1].task if self.groups else 0

    @property
    def group_index(self) -> dict[int, range]:
        out, start = {}, 0
        for g in self.groups:
            out[g.task] = range(start, start + g.size)
            start += g.size
        return out

    @property
    def owners(self) -> np.ndarray:
        return np.concatenate([np.full(g.size, g.task) for g in self.groups]) if self.groups else np.zeros(0, int)

    @property
    def router_weight(self) -> np.ndarray:
        if not self.groups:
            return np.zeros((0, self.d_in))
        return np.concatenate([g.router.data for g in self.groups], axis=0)

    @property
    def router_frozen_rows(self) -> set[int]:
        idx = self.group_index
        return {i for g in self.groups if g.frozen for i in idx[g.task]}

    @property
    def experts(self) -> list[LoraExpert]:
        out = []
        for g in self.groups:
            for j in range(g.size):
                out.append(LoraExpert(g.down.data[j], g.up.data[j], self.rank, g.task, g.frozen))
        return out

    def n_old(self, task: int) -> int:
        """Number of experts owned by tasks earlier than ``task``."""
        return sum(g.size for g in self.groups if g.task < task)

    def trainable(self) -> list[Tensor]:
        return [t for g in self.groups if not g.frozen for t in g.tensors().values()]

    def router_tensor(self) -> Tensor:
        return tc.concat([g.router for g in self.groups], axis=0)

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}t{g.task}.{k}": t for g in self.groups for k, t in g.tensors().items()}


def expand_for_task(reg: ExpertRegistry, cfg: MoeConfig, t: int, rng: np.random.Generator) -> ExpertRegistry:
    """Freeze every existing group and append ``cfg.experts_per_task`` fresh experts for task ``t``.

    Down projections start uniform in +-1/sqrt(d_in), up projections at zero
    (so the new experts contribute nothing until trained), router rows
    normal(0, router_init_std).
    """
    if t != reg.last_task + 1:
        raise ValueError(f"tasks must be added in order: expected {reg.last_task + 1}, got {t}")
    for g in reg.groups:
        g.freeze()
    n, r = cfg.experts_per_task, reg.rank
    bound = 1.0 / math.sqrt(reg.d_in)
    prefix = f"{reg.name}.t{t}" if reg.name else f"t{t}"
    down = Tensor(rng.uniform(-bound, bound, size=(n, r, reg.d_in)), requires_grad=True, name=f"{prefix}.down")
    up = Tensor(np.zeros((n, reg.d_out, r)), requires_grad=True, name=f"{prefix}.up")
    router = Tensor(
        rng.normal(0.0, cfg.router_init_std, size=(n, reg.d_in)), requires_grad=True, name=f"{prefix}.router"
    )
    reg.groups.append(ExpertGroup(t, down, up, router))
    return reg


def prune_experts(reg: ExpertRegistry, fraction: float, activation_freq) -> ExpertRegistry:
    """Drop the ``floor(fraction * N_t)`` least-activated experts of the newest group.

    ``activation_freq`` has one count per expert in the registry. Ties prune
    the lower index first.
    """
    if not reg.groups:
        raise ValueError("empty registry")
    freq = np.asarray(activation_freq, dtype=np.float64)
    if freq.shape != (reg.n_experts,):
        raise ValueError(f"expected {reg.n_experts} activation counts, got shape {freq.shape}")
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    g = reg.groups[-1]
    n_drop = int(math.floor(fraction * g.size + 1e-12))
    if n_drop == 0:
        return reg
    if n_drop >= g.size:
        raise ValueError(f"pruning {n_drop} experts would empty task {g.task}'s group")
    local = freq[reg.n_experts - g.size :]
    order = np.lexsort((np.arange(g.size), local))  # by count, then index
    keep = np.sort(order[n_drop:])
    g.down = Tensor(g.down.data[keep], requires_grad=g.down.requires_grad, name=g.down.name)
    g.up = Tensor(g.up.data[keep], requires_grad=g.up.requires_grad, name=g.up.name)
    g.router = Tensor(g.router.data[keep], requires_grad=g.router.requires_grad, name=g.router.name)
    return reg


@dataclass
class RoutingDecision:
    """Routing of a single token (see :func:`route`)."""

    logits: np.ndarray
    masked_logits: np.ndarray
    weights: np.ndarray
    selected: np.ndarray
    c_old: float
    c_new: float
    d_rel: float
    token_type: int


@dataclass
class BatchRouting:
    """Routing of N tokens at one site. ``weights`` is differentiable."""

    logits: Tensor
    weights: Tensor
    n_old: int
    c_old: np.ndarray
    c_new: np.ndarray
    d_rel: np.ndarray
    types: np.ndarray
    selected: np.ndarray
    selected_raw: np.ndarray
    owners: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def raw_weights(self) -> Tensor:
        """Top-K softmax of the unmasked logits (what RSR regularizes)."""
        if np.array_equal(self.selected, self.selected_raw):
            return self.weights
        return tc.softmax(self.logits, mask=self.selected_raw)


def route_batch(
    h: Tensor, reg: ExpertRegistry, cfg: MoeConfig, policy=None, current_task: int | None = None
) -> BatchRouting:
    """Route every row of ``h`` (N, d_in). ``policy`` maps token type to allowed groups."""
    if not reg.groups:
        raise ValueError("cannot route through an empty registry")
    t = reg.last_task if current_task is None else current_task
    n_old = reg.n_old(t)
    logits = tc.linear(h, reg.router_tensor())
    pol = FREE_POLICY if policy is None else np.asarray(policy, dtype=np.int8)
    c_old, c_new, d_rel, types, sel, sel_raw = route_kernel(
        logits.data, n_old, cfg.top_k, cfg.tau, cfg.epsilon, pol
    )
    if not sel.any(axis=1).all():
        raise RuntimeError("routing left a token with no selectable expert")
    weights = tc.softmax(logits, mask=sel)
    return BatchRouting(logits, weights, n_old, c_old, c_new, d_rel, types, sel, sel_raw, reg.owners)


@lru_cache(maxsize=64)
def _expand_matrix(n_experts: int, rank: int) -> np.ndarray:
    return np.kron(np.eye(n_experts), np.ones((1, rank)))


def moe_apply(h: Tensor, routing: BatchRouting | None, reg: ExpertRegistry, w0, b0=None) -> Tensor:
    """``W0 h + b0 + sum_i w_i up_i down_i h`` for every row of ``h``."""
    base = tc.linear(h, w0, b0)
    if routing is None or not reg.groups:
        return base
    e, r = reg.n_experts, reg.rank
    down = tc.reshape(tc.concat([g.down for g in reg.groups], axis=0), (e * r, reg.d_in))
    up = tc.concat([g.up for g in reg.groups], axis=0)  # (E, d_out, r)
    up = tc.reshape(tc.transpose(up, (0, 2, 1)), (e * r, reg.d_out))
    z = tc.linear(h, down)  # (N, E*r)
    wr = tc.matmul(routing.weights, _expand_matrix(e, r))
    return base + tc.matmul(z * wr, up)


def route(h, reg: ExpertRegistry, cfg: MoeConfig, tag_enabled: bool, current_task: int) -> RoutingDecision:
    """Single-token routing: top-K softmax of the (optionally TAG-masked) router logits."""
    h = np.asarray(h, dtype=np.float64).reshape(1, -1)
    if h.shape[1] != reg.d_in:
        raise ValueError(f"token has dimension {h.shape[1]}, router expects {reg.d_in}")
    policy = TAG_POLICY if (tag_enabled and current_task > 1) else FREE_POLICY
    b = route_batch(Tensor(h), reg, cfg, policy, current_task)
    s = b.logits.data[0]
    masked = np.where(_allowed_row(int(b.types[0]), b.n_old, len(s), policy), s, -np.inf)
    return RoutingDecision(
        logits=s.copy(),
        masked_logits=masked,
        weights=b.weights.data[0].copy(),
        selected=np.flatnonzero(b.selected[0]),
        c_old=float(b.c_old[0]),
        c_new=float(b.c_new[0]),
        d_rel=float(b.d_rel[0]),
        token_type=int(b.types[0]),
    )


def _allowed_row(token_type: int, n_old: int, e: int, policy) -> np.ndarray:
    p = policy[token_type]
    old_cols = np.arange(e) < n_old
    if p == OLD_ONLY:
        return old_cols
    if p == NEW_ONLY:
        return ~old_cols
    return np.ones(e, dtype=bool)


def forward(h, decision: RoutingDecision, reg: ExpertRegistry, w0, b0=None) -> np.ndarray:
    """Single-token output for a routing decision computed on the same ``h``."""
    h = np.asarray(h, dtype=np.float64)
    w0 = np.asarray(w0.data if isinstance(w0, Tensor) else w0)
    if h.shape != (reg.d_in,) or w0.shape != (reg.d_out, reg.d_in):
        raise ValueError("dimension mismatch between token, base weight and registry")
    if decision.weights.shape != (reg.n_experts,):
        raise ValueError("routing decision does not match registry size")
    out = w0 @ h
    if b0 is not None:
        out = out + np.asarray(b0.data if isinstance(b0, Tensor) else b0)
    for i, ex in enumerate(reg.experts):
        wi = decision.weights[i]
        if wi != 0.0:
            out = out + wi * (ex.up @ (ex.down @ h))
    return out


__all__ = [
    "MoeConfig",
    "ExpertGroup",
    "LoraExpert",
    "ExpertRegistry",
    "RoutingDecision",
    "BatchRouting",
    "FREE_POLICY",
    "TAG_POLICY",
    "FIRST_TASK",
    "NEW",
    "OLD",
    "AMBIGUOUS",
    "expand_for_task",
    "prune_experts",
    "route",
    "route_batch",
    "moe_apply",
    "forward",
]
