"""Tiny pre-LN transformer token classifier whose linear sublayers carry expert registries."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .layer import BatchRouting, ExpertRegistry, MoeConfig, expand_for_task, moe_apply, route_batch
from .optim import AdamW, clip_grad_norm
from .tensor import Graph, Tensor, backward

LINEAR_KINDS = ("q", "k", "v", "o", "fc1", "fc2")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    seq_len: int = 16
    d_ff: int = 64
    n_classes: int = 4
    moe_sites: tuple[str, ...] = ("fc1", "fc2")

    def __post_init__(self):
        object.__setattr__(self, "moe_sites", tuple(self.moe_sites))
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not self.moe_sites:
            raise ValueError("moe_sites must be non-empty")
        bad = [s for s in self.moe_sites if s not in LINEAR_KINDS]
        if bad:
            raise ValueError(f"unknown moe_sites {bad}; choose from {LINEAR_KINDS}")
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "seq_len", "d_ff", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def _dims(cfg: BackboneConfig, kind: str) -> tuple[int, int]:
    """(d_in, d_out) of a linear sublayer."""
    if kind == "fc1":
        return cfg.d_model, cfg.d_ff
    if kind == "fc2":
        return cfg.d_ff, cfg.d_model
    return cfg.d_model, cfg.d_model


@dataclass
class ForwardOutput:
    logits: Tensor
    routing: dict[str, BatchRouting] = field(default_factory=dict)


class Model:
    """Frozen base weights, one expert registry per MoE site, and per-task heads.

    Head 0 is the base head used during pretraining.
    """

    def __init__(self, cfg: BackboneConfig, moe: MoeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.moe = moe
        d, v = cfg.d_model, cfg.vocab_size
        p: dict[str, Tensor] = {}
        p["tok_emb"] = Tensor(rng.normal(0.0, 1.0, size=(v, d)))
        p["pos_emb"] = Tensor(rng.normal(0.0, 0.1, size=(cfg.seq_len, d)))
        for layer in range(cfg.n_layers):
            for ln in ("ln1", "ln2"):
                p[f"block{layer}.{ln}.gamma"] = Tensor(np.ones(d))
                p[f"block{layer}.{ln}.beta"] = Tensor(np.zeros(d))
            for kind in LINEAR_KINDS:
                d_in, d_out = _dims(cfg, kind)
                p[f"block{layer}.{kind}.weight"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in)))
                p[f"block{layer}.{kind}.bias"] = Tensor(np.zeros(d_out))
        p["ln_f.gamma"] = Tensor(np.ones(d))
        p["ln_f.beta"] = Tensor(np.zeros(d))
        for name, t in p.items():
            t.name = name
        self.params = p
        self.registries: dict[str, ExpertRegistry] = {}
        for layer in range(cfg.n_layers):
            for kind in cfg.moe_sites:
                d_in, d_out = _dims(cfg, kind)
                site = f"block{layer}.{kind}"
                self.registries[site] = ExpertRegistry(d_in, d_out, moe.rank, name=site)
        self.heads: dict[int, tuple[Tensor, Tensor]] = {}
        self.add_head(0, rng, init="random")
        self.optimizer: AdamW | None = None  # state of the task being trained, kept for checkpoints

    # -- structure -------------------------------------------------------

    @property
    def sites(self) -> list[str]:
        return list(self.registries)

    @property
    def n_tasks(self) -> int:
        return max((r.last_task for r in self.registries.values()), default=0)

    def add_head(self, task: int, rng: np.random.Generator, init: str = "base") -> None:
        """``init``: "shared" reuses the frozen base head, "base" copies it, "random" draws fresh."""
        d, c = self.cfg.d_model, self.cfg.n_classes
        if init == "shared" and 0 in self.heads:
            self.heads[task] = self.heads[0]
            return
        if init == "base" and 0 in self.heads:
            w = self.heads[0][0].data.copy()
            b = self.heads[0][1].data.copy()
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(d), size=(c, d))
            b = np.zeros(c)
        self.heads[task] = (Tensor(w, name=f"head{task}.weight"), Tensor(b, name=f"head{task}.bias"))

    def expand_for_task(self, task: int, rng: np.random.Generator, head_init: str = "base") -> None:
        """Freeze everything that exists, then add experts at every site and a head for ``task``."""
        for w, b in self.heads.values():
            w.requires_grad = b.requires_grad = False
        for reg in self.registries.values():
            expand_for_task(reg, self.moe, task, rng)
        self.add_head(task, rng, init=head_init)
        if not self.shares_base_head(task):
            for t in self.heads[task]:
                t.requires_grad = True

    def shares_base_head(self, task: int) -> bool:
        return task != 0 and self.heads.get(task) is self.heads.get(0)

    def freeze_base(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
        for t in self.heads[0]:
            t.requires_grad = False

    def trainable(self) -> dict[str, Tensor]:
        """Every tensor that currently requires grad, keyed by name."""
        return {name: t for name, t in self.named_tensors().items() if t.requires_grad}

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for task, (w, b) in sorted(self.heads.items()):
            if self.shares_base_head(task):
                continue
            out[f"head{task}.weight"] = w
            out[f"head{task}.bias"] = b
        for site, reg in self.registries.items():
            out.update(reg.named_tensors(prefix=f"{site}.experts."))
        return out

    def owner_of(self, name: str) -> int:
        """Task that owns a tensor (0 for the base model)."""
        if name.startswith("head"):
            return int(name[4:].split(".")[0])
        if ".experts.t" in name:
            return int(name.split(".experts.t")[1].split(".")[0])
        return 0

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------------

    def _linear(self, layer: int, kind: str, h: Tensor, current: int, policy, routing: dict) -> Tensor:
        w = self.params[f"block{layer}.{kind}.weight"]
        b = self.params[f"block{layer}.{kind}.bias"]
        site = f"block{layer}.{kind}"
        reg = self.registries.get(site)
        if reg is None or not reg.groups:
            return tc.linear(h, w, b)
        shape = h.shape
        flat = tc.reshape(h, (-1, shape[-1])) if h.ndim != 2 else h
        r = route_batch(flat, reg, self.moe, policy, current_task=current)
        routing[site] = r
        out = moe_apply(flat, r, reg, w, b)
        return tc.reshape(out, (*shape[:-1], reg.d_out)) if h.ndim != 2 else out

    def forward(self, tokens: np.ndarray, task: int, policy=None, current_task: int | None = None) -> ForwardOutput:
        """Classifier logits (B*S, C) for ``tokens`` (B, S) under head ``task``.

        ``policy`` restricts which expert groups each token type may use
        (training-time guidance); None routes freely. ``current_task`` decides
        the old/new split used for token typing and defaults to ``task``.
        """
        if task not in self.heads:
            raise KeyError(f"no classifier head for task {task}")
        tokens = np.asarray(tokens, dtype=np.int64)
        bsz, s = tokens.shape
        cfg = self.cfg
        nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        p = self.params
        routing: dict[str, BatchRouting] = {}
        cur = task if current_task is None else current_task
        x = tc.take(p["tok_emb"], tokens) + tc.take(p["pos_emb"], np.arange(s))
        for layer in range(cfg.n_layers):
            pre = f"block{layer}"
            h = tc.layer_norm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
            h2 = tc.reshape(h, (bsz * s, cfg.d_model))
            heads = []
            for kind in ("q", "k", "v"):
                y = self._linear(layer, kind, h2, cur, policy, routing)
                heads.append(tc.transpose(tc.reshape(y, (bsz, s, nh, dh)), (0, 2, 1, 3)))
            q, k, v = heads
            att = tc.softmax(tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)))
            o = tc.reshape(tc.transpose(tc.matmul(att, v), (0, 2, 1, 3)), (bsz * s, cfg.d_model))
            o = self._linear(layer, "o", o, cur, policy, routing)
            x = x + tc.reshape(o, (bsz, s, cfg.d_model))
            h = tc.layer_norm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
            h = tc.reshape(h, (bsz * s, cfg.d_model))
            u = tc.gelu(self._linear(layer, "fc1", h, cur, policy, routing))
            u = self._linear(layer, "fc2", u, cur, policy, routing)
            x = x + tc.reshape(u, (bsz, s, cfg.d_model))
        x = tc.layer_norm(x, p["ln_f.gamma"], p["ln_f.beta"])
        w, b = self.heads[task]
        logits = tc.linear(tc.reshape(x, (bsz * s, cfg.d_model)), w, b)
        return ForwardOutput(logits, routing)


def forward_with_moe(model: Model, tokens, task: int, policy=None, collect: bool = False):
    """Logits, plus the per-site routing trace when ``collect`` is set."""
    out = model.forward(tokens, task, policy)
    return (out.logits, out.routing) if collect else out.logits


def pretrain_base(
    cfg: BackboneConfig,
    moe: MoeConfig,
    base_task,
    steps: int,
    seed: int,
    lr: float = 3e-3,
    batch_size: int = 32,
) -> Model:
    """Train every base weight on ``base_task`` (a TaskDataset) and freeze it."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))
    model = Model(cfg, moe, rng)
    params = dict(model.params)
    params["head0.weight"], params["head0.bias"] = model.heads[0]
    for t in params.values():
        t.requires_grad = True
    opt = AdamW(params)
    n = len(base_task.train_tokens)
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        with Graph() as g:
            logits = model.forward(base_task.train_tokens[idx], 0).logits
            loss = tc.cross_entropy(logits, base_task.train_labels[idx].reshape(-1))
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"pretraining diverged at step {step}")
        grads = backward(g, loss)
        clip_grad_norm(grads, 1.0)
        opt.step(grads, lr)
    model.freeze_base()
    for t in model.named_tensors().values():
        t.data[...] = t.data.astype(np.float32).astype(np.float64)
    return model


__all__ = ["BackboneConfig", "Model", "ForwardOutput", "forward_with_moe", "pretrain_base", "LINEAR_KINDS"]
