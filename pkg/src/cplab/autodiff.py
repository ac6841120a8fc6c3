"""Minimal reverse-mode automatic differentiation on top of numpy.

Every continuous quantity in the lab (observations, feature maps,
perturbations, embeddings, parameters) is a :class:`Tensor`.  Operations on
tensors that need gradients record a node pointing at their inputs together
with a closure computing the vector-Jacobian product.  :func:`backward` sorts
the recorded graph topologically (the "tape") and walks it once in reverse.

Data is float32 throughout.  Broadcasting is deliberately limited to
scalar-vs-tensor; the few layer primitives that need a bias (``conv2d``,
``linear``) take it as an explicit argument.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
COS_EPS = 1e-8

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, attacks' clean passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _wrap(arr) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(arr, dtype=DTYPE)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.op = "leaf"
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else _wrap(np.asarray(x, dtype=DTYPE))


def _node(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = _wrap(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom(data, parents: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Record a hand-written op: ``backward(g)`` returns one gradient per parent."""
    return _node(data, tuple(as_tensor(p) for p in parents), backward, op)


# ---------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Topologically ordered nodes reachable from a loss."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in reversed(t._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list:
        return [t for t in self.nodes if t.is_leaf]


def backward(loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) to every grad-enabled leaf.

    Leaves get ``.grad`` overwritten with their total derivative; the same
    mapping is returned keyed by tensor.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no grad-enabled inputs)")
    tape = Tape.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    result = {}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.astype(DTYPE, copy=False)
            result[t] = t.grad
            continue
        pgrads = t._backward(g)
        for p, pg in zip(t._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return result


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=DTYPE).reshape(shape)


def _check_binary(a: Tensor, b: Tensor):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by a tensor containing zeros")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0).astype(DTYPE), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    out = np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))
    out = out.astype(DTYPE)
    return _node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def sign(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),), "sign")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: {lo} > {hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, DTYPE(lo), DTYPE(hi))
    return _node(out, (a,), lambda g: (g * inside,), "clamp")


def minimum(a, b) -> Tensor:
    return a - relu(a - b)


def maximum(a, b) -> Tensor:
    return b + relu(a - b)


# ---------------------------------------------------------------------------
# structural


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, dtype=DTYPE), (a,), bw, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack of an empty sequence")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ValueError(f"shape mismatch in stack: {t.shape} vs {shape}")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def _shift_array(x: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    if abs(dr) >= h or abs(dc) >= w:
        return out
    src_r = slice(max(0, -dr), h - max(0, dr))
    dst_r = slice(max(0, dr), h - max(0, -dr))
    src_c = slice(max(0, -dc), w - max(0, dc))
    dst_c = slice(max(0, dc), w - max(0, -dc))
    out[..., dst_r, dst_c] = x[..., src_r, src_c]
    return out


def shift2d(a: Tensor, dr: int, dc: int) -> Tensor:
    """Translate the last two axes by whole cells, zero-filling vacated cells."""
    dr, dc = int(dr), int(dc)
    if dr == 0 and dc == 0:
        return a
    return _node(_shift_array(a.data, dr, dc), (a,),
                 lambda g: (_shift_array(g, -dr, -dc),), "shift2d")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _expand(g: np.ndarray, axes: tuple, shape: tuple) -> np.ndarray:
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def tsum(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ValueError("reduction over an empty tensor")
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, dtype=np.float64)
    return _node(out, (a,), lambda g: (_expand(g, axes, a.shape).astype(DTYPE),), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ValueError("reduction over an empty tensor")
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, dtype=np.float64)
    return _node(out, (a,), lambda g: ((_expand(g, axes, a.shape) / n).astype(DTYPE),), "mean")


def tmax(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ValueError("reduction over an empty tensor")
    axes = _norm_axis(axis, a.ndim)
    out = a.data.max(axis=axes)

    def bw(g):
        mask = a.data == _expand(out, axes, a.shape)
        count = mask.sum(axis=axes, keepdims=True)
        return ((_expand(g, axes, a.shape) * mask / count).astype(DTYPE),)

    return _node(out, (a,), bw, "max")


def argmax(a, axis=None) -> np.ndarray:
    """Index of the maximum; not differentiable, returned as a plain integer array."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    if data.size == 0:
        raise ValueError("argmax of an empty tensor")
    return np.argmax(data, axis=axis)


def sort_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean over equally shaped tensors.

    Values are sorted along the stacking axis and accumulated in float64, so
    the result does not depend on input order and the mean of identical inputs
    reproduces them bit for bit.
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("mean over an empty set of tensors")
    n = len(tensors)
    for t in tensors:
        if t.shape != tensors[0].shape:
            raise ValueError(f"shape mismatch in mean: {t.shape} vs {tensors[0].shape}")
    if n == 1:
        return tensors[0]
    stacked = np.stack([t.data for t in tensors]).astype(np.float64)
    out = (np.sort(stacked, axis=0).sum(axis=0) / n).astype(DTYPE)
    return _node(out, tensors, lambda g: tuple((g / n).astype(DTYPE) for _ in range(n)), "sort_mean")


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with the bias row repeated over the batch."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[1]}")
        out = out + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)

    def bw(g):
        grads = (g @ w.data.T, x.data.T @ g)
        if b is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return _node(out, parents, bw, "linear")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise ValueError(f"non-integral output size for input {size}, kernel {k}, "
                         f"stride {stride}, pad {pad}")
    return span // stride + 1


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``C_in x H x W`` (or batched ``N x C_in x H x W``) input."""
    x, k = as_tensor(x), as_tensor(k)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4 or xd.shape[1] != k.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {k.shape}")
    n, c, h, w = xd.shape
    co, _, kh, kw = k.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = k.data.reshape(co, -1)
    out = cols @ kmat.T
    if bias is not None:
        if bias.shape != (co,):
            raise ValueError(f"bias shape {bias.shape} does not match {co} output channels")
        out = out + bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def bw(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gk = (g2.T @ cols).reshape(k.shape)
        gcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gx = gx[0] if squeeze else gx
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    parents = (x, k) if bias is None else (x, k, bias)
    return _node(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# losses and similarities


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def softmax_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    Optional per-row ``weights`` turn the mean into a weighted mean.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise ValueError("cross-entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    labels = labels.astype(np.intp)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    x = logits.data.astype(np.float64)
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(n), labels]
    out = (w * nll).sum() / wsum
    probs = np.exp(logp)

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((d * (w / wsum)[:, None] * g).astype(DTYPE),)

    return _node(out, (logits,), bw, "softmax_ce")


def cosine_matrix64(a: np.ndarray, b: np.ndarray, eps: float = COS_EPS):
    """Float64 cosine matrix of the rows of ``a`` and ``b`` plus its vector-Jacobian product.

    Returns ``(S, vjp)`` where ``vjp(g)`` maps an upstream gradient on ``S`` to
    float64 gradients on ``a`` and ``b``.
    """
    ad, bd = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    valid = (na[:, None] >= eps) & (nb[None, :] >= eps)
    dots = ad @ bd.T
    den = na[:, None] * nb[None, :] + eps
    out = np.where(valid, dots / den, 0.0)

    def vjp(g):
        gv = np.where(valid, np.asarray(g, dtype=np.float64), 0.0)
        q = gv / den
        r = gv * dots / den ** 2
        sa = np.divide(1.0, na, out=np.zeros_like(na), where=na >= eps)
        sb = np.divide(1.0, nb, out=np.zeros_like(nb), where=nb >= eps)
        ga = q @ bd - (r * nb[None, :]).sum(axis=1)[:, None] * ad * sa[:, None]
        gb = q.T @ ad - (r * na[:, None]).sum(axis=0)[:, None] * bd * sb[:, None]
        return ga, gb

    return out, vjp


def pairwise_cosine(a: Tensor, b: Tensor, eps: float = COS_EPS) -> Tensor:
    """Cosine similarity between every row of ``a`` (M x D) and of ``b`` (N x D).

    Uses ``u.v / (|u||v| + eps)`` and yields exactly 0 (with zero gradient) for
    any pair where a norm falls below ``eps``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    out, vjp = cosine_matrix64(a.data, b.data, eps)

    def bw(g):
        ga, gb = vjp(g)
        return ga.astype(DTYPE), gb.astype(DTYPE)

    return _node(out, (a, b), bw, "pairwise_cosine")


def cosine_similarity(u: Tensor, v: Tensor, eps: float = COS_EPS) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    return reshape(pairwise_cosine(reshape(u, (1, -1)), reshape(v, (1, -1)), eps), ())


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimState:
    """Learning rate, step counter and per-parameter moment buffers."""

    learning_rate: float
    kind: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def sgd_step(params: Sequence[Tensor], grads: Sequence, state: OptimState) -> list:
    """Update ``params`` in place from ``grads`` (None means zero) and return them.

    ``state.kind == "adam"`` switches to bias-corrected first/second moment
    scaling; the default is the plain ``p <- p - lr * g`` rule.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE)
             for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    state.step += 1
    lr = DTYPE(state.learning_rate)
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p.data = (p.data - lr * g).astype(DTYPE)
        return list(params)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.shape:
            raise ValueError("optimizer accumulators do not match parameter shapes")
        state.m[i] = (b1 * state.m[i] + (1 - b1) * g).astype(DTYPE)
        state.v[i] = (b2 * state.v[i] + (1 - b2) * g * g).astype(DTYPE)
        upd = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data - lr * upd).astype(DTYPE)
    return list(params)


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int | None = None) -> Tensor:
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return Tensor(data, requires_grad=True)


def zeros_param(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def parameters_grads(params: Iterable[Tensor]) -> list:
    return [p.grad for p in params]
