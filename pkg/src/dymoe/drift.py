"""Token typing, assignment guidance, and routing-score regularizers.

Every loss here is written once against :mod:`dymoe.tensor` ops, so the same
function evaluates a single token from plain floats or a whole batch of
differentiable routing weights.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .kernels import AMBIGUOUS, FIRST_TASK, NEW, OLD
from .layer import BatchRouting
from .tensor import Tensor

BCE_CLAMP = 1e-7


class TokenType(enum.IntEnum):
    FIRST_TASK = FIRST_TASK
    NEW = NEW
    OLD = OLD
    AMBIGUOUS = AMBIGUOUS


@dataclass(frozen=True)
class GroupConfidence:
    c_old: float
    c_new: float
    d_rel: float


@dataclass
class GateMass:
    g_old: Tensor | float
    g_new: Tensor | float
    g_tilde_old: np.ndarray | float


@dataclass(frozen=True)
class LossBundle:
    l_ntp: float
    l_aux: float
    l_exc: float
    l_spe: float
    lam: float
    alpha: float
    total: float


def _indices(r) -> np.ndarray:
    if isinstance(r, slice):
        return np.arange(r.start or 0, r.stop)
    return np.asarray(list(r), dtype=np.int64)


def group_confidence(s, old, new, eps: float = 1e-9) -> GroupConfidence:
    """Max logit of each group and their relative gap."""
    s = np.asarray(s, dtype=np.float64)
    old, new = _indices(old), _indices(new)
    if old.size == 0 or new.size == 0:
        raise ValueError("both expert groups must be non-empty")
    if not eps > 0:
        raise ValueError("eps must be positive")
    c_old = float(s[old].max())
    c_new = float(s[new].max())
    d_rel = abs(c_new - c_old) / (max(abs(c_new), abs(c_old)) + eps)
    return GroupConfidence(c_old, c_new, d_rel)


def classify_token(gc: GroupConfidence, tau: float) -> TokenType:
    if gc.d_rel <= tau:
        return TokenType.AMBIGUOUS
    return TokenType.NEW if gc.c_new > gc.c_old else TokenType.OLD


def tag_mask(s, old, new, tau: float, eps: float = 1e-9) -> np.ndarray:
    """Logits with the disallowed group set to -inf.

    Only new-dominant, unambiguous tokens may use the new group; everything
    else keeps to the old group. The mask is a hard decision and carries no
    gradient.
    """
    s = np.asarray(s, dtype=np.float64)
    kind = classify_token(group_confidence(s, old, new, eps), tau)
    out = s.copy()
    blocked = _indices(old) if kind == TokenType.NEW else _indices(new)
    out[blocked] = -np.inf
    return out


def gate_mass(w, old, new) -> GateMass:
    """Routing mass per group; ``w`` is (E,) or (N, E), floats or a Tensor.

    ``g_tilde_old`` (largest single old weight) is returned detached.
    """
    w = tc.as_tensor(w)
    e = w.shape[-1]
    old_cols = np.zeros(e)
    old_cols[_indices(old)] = 1.0
    new_cols = np.zeros(e)
    new_cols[_indices(new)] = 1.0
    g_old = tc.tsum(w * old_cols, axis=-1)
    g_new = tc.tsum(w * new_cols, axis=-1)
    oi = _indices(old)
    g_tilde = w.data[..., oi].max(axis=-1) if oi.size else np.zeros(w.shape[:-1])
    return GateMass(g_old, g_new, g_tilde)


def exclusivity_loss(gm: GateMass) -> Tensor:
    """Product of the two groups' collective gates; zero iff routing is exclusive."""
    return tc.as_tensor(gm.g_old) * gm.g_new


def specialization_loss(gm: GateMass, delta: float = BCE_CLAMP, target=None) -> Tensor:
    """BCE pulling new-group mass towards the detached target ``1 - g_tilde_old``.

    ``target`` overrides that target with a fixed array, which lets a finite
    difference hold it constant the way the gradient does.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    y = 1.0 - np.asarray(gm.g_tilde_old, dtype=np.float64) if target is None else np.asarray(target, np.float64)
    g = tc.clamp(gm.g_new, delta, 1.0 - delta)
    return -(tc.log(g) * y) - tc.log(1.0 - g) * (1.0 - y)


def switch_balance(f, p) -> float:
    """``N * sum_i f_i P_i`` for given dispatch fractions and mean probabilities."""
    f = np.asarray(f, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return float(len(f) * np.dot(f, p))


def load_balance_loss(probs) -> Tensor:
    """Switch-style balance loss over one expert group.

    ``probs`` is (N, G): each token's routing distribution over the group's G
    experts. ``f_i`` counts tokens whose top-1 within the group is ``i`` (no
    gradient); ``P_i`` is the mean probability and carries the gradient.
    """
    probs = tc.as_tensor(probs)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("load_balance_loss needs a non-empty (N, G) batch")
    n, g = probs.shape
    f = np.bincount(np.argmax(probs.data, axis=1), minlength=g) / n
    p = tc.mean(probs, axis=0)
    return tc.tsum(p * (f * g))


def combine_losses(l_ntp, l_aux, l_exc, l_spe, lam: float, alpha: float):
    """``l_ntp + lam * l_aux + alpha * (l_exc + l_spe)`` for floats or Tensors."""
    return l_ntp + l_aux * lam + (l_exc + l_spe) * alpha


def total_loss(l_ntp, l_aux, l_exc, l_spe, lam: float, alpha: float) -> LossBundle:
    parts = [float(x) for x in (l_ntp, l_aux, l_exc, l_spe)]
    if not all(math.isfinite(x) for x in parts + [lam, alpha]):
        raise FloatingPointError(f"non-finite loss component in {parts}")
    total = combine_losses(*parts, lam, alpha)
    return LossBundle(*parts, lam=lam, alpha=alpha, total=total)


# -- batched helpers used by the trainer ---------------------------------------


def rsr_terms(routing: BatchRouting) -> tuple[Tensor, Tensor] | None:
    """Per-token exclusivity and specialization losses at one site (None on task 1)."""
    e = routing.logits.shape[1]
    if routing.n_old == 0 or routing.n_old == e:
        return None
    gm = gate_mass(routing.raw_weights(), range(routing.n_old), range(routing.n_old, e))
    return exclusivity_loss(gm), specialization_loss(gm)


def site_load_balance(routing: BatchRouting) -> Tensor:
    """Balance loss over the newest group using its dense softmax."""
    e = routing.logits.shape[1]
    n_new = e - routing.n_old
    new_cols = np.zeros((routing.logits.shape[0], e), dtype=bool)
    new_cols[:, routing.n_old :] = True
    probs = tc.softmax(routing.logits, mask=new_cols)
    if n_new != e:
        probs = tc.matmul(probs, np.eye(e)[:, routing.n_old :])
    return load_balance_loss(probs)


__all__ = [
    "TokenType",
    "GroupConfidence",
    "GateMass",
    "LossBundle",
    "BCE_CLAMP",
    "group_confidence",
    "classify_token",
    "tag_mask",
    "gate_mass",
    "exclusivity_loss",
    "specialization_loss",
    "switch_balance",
    "load_balance_loss",
    "combine_losses",
    "total_loss",
    "rsr_terms",
    "site_load_balance",
]
