"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op goes through :func:`forward_op`, which evaluates the numpy kernel and,
when a :class:`Graph` is active and any input requires grad, appends a node to
it. Nodes are appended in evaluation order, so the tape is already
topologically sorted and :func:`backward` just walks it in reverse.

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        loss = tsum(w * w)
    grads = backward(g, loss)   # grads[w] == 2 * w.data
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "forward_op",
    "backward",
    "finite_diff_check",
    "finite_diff_check_many",
    "as_tensor",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "clamp",
    "tmax",
    "tsum",
    "mean",
    "softmax",
    "cross_entropy",
    "gelu",
    "layer_norm",
    "reshape",
    "transpose",
    "concat",
    "take",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_state = threading.local()


def _active_graph() -> "Graph | None":
    return getattr(_state, "graph", None)


class Tensor:
    """Row-major float64 array plus a ``requires_grad`` flag.

    Tensors are treated as immutable once created; the optimizer is the only
    code that writes into ``data`` and it does so between graphs.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Tape of op records. Use as a context manager to make it active."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False
        self._prev: Graph | None = None

    def __enter__(self) -> "Graph":
        self._prev = _active_graph()
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- kernels ---------------------------------------------------------------
# Each kernel takes input arrays (+ attrs) and returns (out, vjp) where
# vjp(g) yields one gradient (or None) per input.


def _k_add(a, b):
    try:
        out = a + b
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _k_sub(a, b):
    try:
        out = a - b
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _k_mul(a, b):
    try:
        out = a * b
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return out, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _k_scale(a, *, c: float):
    return a * c, lambda g: (g * c,)


def _k_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a @ b

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


def _k_linear(x, w, b=None):
    # x (..., d_in), w (d_out, d_in), b (d_out,)
    if x.shape[-1] != w.shape[1] or (b is not None and b.shape != (w.shape[0],)):
        raise ShapeError(f"linear shape mismatch x{x.shape} w{w.shape}")
    out = x @ w.T
    if b is not None:
        out = out + b

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w
        gw = g2.T @ x.reshape(-1, x.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return out, vjp


def _k_exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _k_log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a)
    return out, lambda g: (g / a,)


def _k_clamp(a, *, lo: float, hi: float):
    out = np.clip(a, lo, hi)
    inside = (a >= lo) & (a <= hi)
    return out, lambda g: (g * inside,)


def _k_max(a, *, axis: int, keepdims: bool = False):
    # argmax picks the first occurrence: ties route to the lowest index.
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    out = np.take_along_axis(a, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, idx, gk, axis=axis)
        return (ga,)

    return out, vjp


def _k_sum(a, *, axis=None, keepdims: bool = False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return np.asarray(out), vjp


def _k_mean(a, *, axis=None, keepdims: bool = False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return np.asarray(out), vjp


def _k_softmax(a, *, mask=None):
    # Softmax over the last axis restricted to ``mask``; masked slots are 0.
    if mask is None:
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        if mask.shape != a.shape:
            raise ShapeError(f"mask shape {mask.shape} != {a.shape}")
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax row with every entry masked")
        m = np.where(mask, a, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, a - m, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return y, vjp


def _k_cross_entropy(logits, *, targets):
    # mean over rows of -log softmax(logits)[target]
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy wants (N, C) logits and (N,) targets")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = np.asarray(np.mean(lse - z[rows, targets]))

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return out, vjp


_GELU_C = np.sqrt(2.0 / np.pi)


def _k_gelu(a):
    u = _GELU_C * (a + 0.044715 * a**3)
    t = np.tanh(u)
    out = 0.5 * a * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * a**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)

    return out, vjp


def _k_layer_norm(x, gamma, beta, *, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gamma + beta

    def vjp(g):
        d = x.shape[-1]
        gxh = g * gamma
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xh.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return out, vjp


def _k_reshape(a, *, shape):
    try:
        out = a.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return out, lambda g: (g.reshape(a.shape),)


def _k_transpose(a, *, axes):
    inv = np.argsort(axes)
    return np.ascontiguousarray(np.transpose(a, axes)), lambda g: (np.transpose(g, inv),)


def _k_concat(*arrs, axis: int = 0):
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    splits = np.cumsum([a.shape[axis] for a in arrs])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


def _k_take(table, *, index):
    out = table[index]

    def vjp(g):
        gt = np.zeros_like(table)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return out, vjp


_OPS: dict[str, Callable] = {
    "add": _k_add,
    "sub": _k_sub,
    "mul": _k_mul,
    "scale": _k_scale,
    "matmul": _k_matmul,
    "linear": _k_linear,
    "exp": _k_exp,
    "log": _k_log,
    "clamp": _k_clamp,
    "max": _k_max,
    "sum": _k_sum,
    "mean": _k_mean,
    "softmax": _k_softmax,
    "cross_entropy": _k_cross_entropy,
    "gelu": _k_gelu,
    "layer_norm": _k_layer_norm,
    "reshape": _k_reshape,
    "transpose": _k_transpose,
    "concat": _k_concat,
    "take": _k_take,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate op ``kind`` on ``inputs`` and record it on the active graph."""
    try:
        kernel = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    xs = tuple(as_tensor(x) for x in inputs)
    with np.errstate(over="ignore", invalid="ignore"):  # reported just below
        out, vjp = kernel(*(x.data for x in xs), **attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite output from {kind}")
    t = Tensor(out)
    graph = _active_graph()
    if graph is not None and any(x.requires_grad for x in xs):
        if graph.consumed:
            raise GraphError("graph already consumed by backward()")
        t.requires_grad = True
        graph.nodes.append(_Node(kind, xs, t, vjp))
    return t


def backward(graph: Graph, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every leaf that requires grad.

    Leaves reached only through masked or non-selected branches get zero
    arrays. The graph is consumed: calling this twice raises GraphError.
    """
    if graph.consumed:
        raise GraphError("graph already consumed by backward()")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    graph.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in graph.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.vjp(g)):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            if key not in produced:
                leaves[key] = x
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = np.array(gx, dtype=np.float64, copy=True)
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    graph.nodes = []
    return {t: grads.get(k, np.zeros_like(t.data)).reshape(t.shape) for k, t in leaves.items()}


def finite_diff_check_many(
    fn: Callable[[], dict], params: Sequence[Tensor], h_step: float = 1e-5, floor: float = 1e-8
) -> dict:
    """Like :func:`finite_diff_check` for a ``fn`` returning several named scalars.

    Every perturbation costs one call of ``fn`` for all outputs at once; the
    result maps each name to its max relative error.
    """
    if h_step <= 0 or floor <= 0:
        raise ValueError("h_step and floor must be positive")
    outs = fn()
    analytic = {}
    for name in outs:
        # backward consumes its graph, so each output records its own pass
        with Graph() as g:
            loss = fn()[name]
        analytic[name] = backward(g, loss) if loss.requires_grad else {}
    worst = dict.fromkeys(outs, 0.0)
    for p in params:
        gas = {}
        for name in outs:
            ga = analytic[name].get(p)
            gas[name] = (np.zeros_like(p.data) if ga is None else ga).reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h_step
            fp = {k: float(v) for k, v in fn().items()}
            flat[i] = orig - h_step
            fm = {k: float(v) for k, v in fn().items()}
            flat[i] = orig
            for name, ga in gas.items():
                num = (fp[name] - fm[name]) / (2 * h_step)
                err = abs(ga[i] - num) / (max(abs(ga[i]), abs(num)) + floor)
                worst[name] = max(worst[name], err)
    return worst


def finite_diff_check(
    fn: Callable[[], Tensor], params: Sequence[Tensor], h_step: float = 1e-5, floor: float = 1e-8
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild its scalar result from ``params`` on every call; the
    params are perturbed in place and restored. Each entry's error is
    ``|a - n| / (max(|a|, |n|) + floor)``; raise ``floor`` above the quotient's
    roundoff (about ``eps * |loss| / h_step``) when some gradients are tiny.
    """
    return finite_diff_check_many(lambda: {"loss": fn()}, params, h_step, floor)["loss"]


# -- public op wrappers ------------------------------------------------------


def add(a, b) -> Tensor:
    return forward_op("add", (a, b))


def sub(a, b) -> Tensor:
    return forward_op("sub", (a, b))


def mul(a, b) -> Tensor:
    return forward_op("mul", (a, b))


def scale(a, c: float) -> Tensor:
    return forward_op("scale", (a,), c=float(c))


def matmul(a, b) -> Tensor:
    return forward_op("matmul", (a, b))


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (d_out, d_in)."""
    return forward_op("linear", (x, w) if b is None else (x, w, b))


def exp(a) -> Tensor:
    return forward_op("exp", (a,))


def log(a) -> Tensor:
    return forward_op("log", (a,))


def clamp(a, lo: float, hi: float) -> Tensor:
    return forward_op("clamp", (a,), lo=float(lo), hi=float(hi))


def tmax(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return forward_op("max", (a,), axis=axis, keepdims=keepdims)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    return forward_op("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return forward_op("mean", (a,), axis=axis, keepdims=keepdims)


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; with ``mask`` only True slots participate."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return forward_op("softmax", (a,), mask=mask)


def cross_entropy(logits, targets) -> Tensor:
    return forward_op("cross_entropy", (logits,), targets=np.asarray(targets, dtype=np.int64))


def gelu(a) -> Tensor:
    return forward_op("gelu", (a,))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return forward_op("layer_norm", (x, gamma, beta), eps=eps)


def reshape(a, shape) -> Tensor:
    return forward_op("reshape", (a,), shape=tuple(shape))


def transpose(a, axes) -> Tensor:
    return forward_op("transpose", (a,), axes=tuple(axes))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    if len(tensors) == 1:
        return as_tensor(tensors[0])
    return forward_op("concat", tuple(tensors), axis=axis)


def take(table, index) -> Tensor:
    """Row gather ``table[index]`` (embedding lookup)."""
    return forward_op("take", (table,), index=np.asarray(index, dtype=np.int64))
