"""Independent float64 reference implementations and oracles used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

from cplab import autodiff as ad
from cplab.autodiff import Tensor


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


# ---------------------------------------------------------------------------
# reference forward passes


def conv2d_ref(x, k, b=None, stride=1, pad=0):
    x = np.asarray(x, np.float64)
    k = np.asarray(k, np.float64)
    c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * k[o]) + (0.0 if b is None else b[o])
    return out


def softmax_ref(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cosine_ref(u, v, eps=1e-8):
    nu, nv = math.sqrt(float(np.dot(u, u))), math.sqrt(float(np.dot(v, v)))
    if nu < eps or nv < eps:
        return 0.0
    return float(np.dot(u, v)) / (nu * nv + eps)


def shift_ref(x, dr, dc):
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    for r in range(h):
        for c in range(w):
            if 0 <= r - dr < h and 0 <= c - dc < w:
                out[..., r, c] = x[..., r - dr, c - dc]
    return out


# ---------------------------------------------------------------------------
# op table: (name, elementwise, make_inputs(rng), engine(*tensors), reference(*arrays))


def _away(rng, shape, lo=0.1, hi=2.0):
    """Random values with magnitude in [lo, hi] and random sign (keeps away from kinks)."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _positive(rng, shape):
    return rng.uniform(0.3, 2.0, size=shape)


def _labels(rng):
    return rng.integers(0, 4, size=3)


OP_CASES = [
    ("add", True, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], ad.add, np.add),
    ("add_scalar", True, lambda r: [r.normal(size=(3, 4)), r.normal(size=())], ad.add, np.add),
    ("sub", True, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], ad.sub, np.subtract),
    ("mul", True, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], ad.mul, np.multiply),
    ("mul_scalar", True, lambda r: [r.normal(size=()), r.normal(size=(5,))], ad.mul, np.multiply),
    ("div", True, lambda r: [r.normal(size=(3, 4)), _away(r, (3, 4), 0.5)], ad.div, np.divide),
    ("neg", True, lambda r: [r.normal(size=(6,))], ad.neg, np.negative),
    ("exp", True, lambda r: [r.normal(size=(6,))], ad.exp, np.exp),
    ("log", True, lambda r: [_positive(r, (6,))], ad.log, np.log),
    ("relu", True, lambda r: [_away(r, (8,))], ad.relu, lambda x: np.maximum(x, 0)),
    ("sigmoid", True, lambda r: [r.normal(size=(6,)) * 3], ad.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    ("abs", True, lambda r: [_away(r, (8,))], ad.tabs, np.abs),
    ("clamp", True, lambda r: [np.concatenate([r.uniform(-0.9, 0.9, 4), _away(r, (4,), 1.1, 2.0)])],
     lambda a: ad.clamp(a, -1.0, 1.0), lambda x: np.clip(x, -1, 1)),
    ("minimum", True, lambda r: (lambda a: [a, a + _away(r, a.shape, 0.1, 1.0)])(r.normal(size=(6,))),
     ad.minimum, np.minimum),
    ("maximum", True, lambda r: (lambda a: [a, a + _away(r, a.shape, 0.1, 1.0)])(r.normal(size=(6,))),
     ad.maximum, np.maximum),
    ("reshape", False, lambda r: [r.normal(size=(2, 6))], lambda a: ad.reshape(a, (3, 4)),
     lambda x: x.reshape(3, 4)),
    ("transpose", False, lambda r: [r.normal(size=(2, 3, 4))], lambda a: ad.transpose(a, (2, 0, 1)),
     lambda x: np.transpose(x, (2, 0, 1))),
    ("getitem", False, lambda r: [r.normal(size=(5, 3))], lambda a: a[np.array([0, 2, 2, 4]), 1:],
     lambda x: x[np.array([0, 2, 2, 4]), 1:]),
    ("stack", False, lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2))],
     lambda a, b: ad.stack([a, b], axis=1), lambda x, y: np.stack([x, y], axis=1)),
    ("concat", False, lambda r: [r.normal(size=(2, 3)), r.normal(size=(4, 3))],
     lambda a, b: ad.concat([a, b]), lambda x, y: np.concatenate([x, y])),
    ("shift2d", False, lambda r: [r.normal(size=(2, 5, 5))], lambda a: ad.shift2d(a, 2, -1),
     lambda x: shift_ref(x, 2, -1)),
    ("sum_axis", False, lambda r: [r.normal(size=(3, 4))], lambda a: ad.tsum(a, 1), lambda x: x.sum(1)),
    ("mean", False, lambda r: [r.normal(size=(3, 4))], lambda a: ad.mean(a, 0), lambda x: x.mean(0)),
    ("max", False, lambda r: [r.normal(size=(3, 5))], lambda a: ad.tmax(a, 1), lambda x: x.max(1)),
    ("sort_mean", False, lambda r: [r.normal(size=(4,)), r.normal(size=(4,)), r.normal(size=(4,))],
     lambda *t: ad.sort_mean(t), lambda *x: np.mean(x, axis=0)),
    ("matmul", False, lambda r: [r.normal(size=(3, 3)), r.normal(size=(3, 3))], ad.matmul, np.matmul),
    ("linear", False, lambda r: [r.normal(size=(4, 3)), r.normal(size=(3, 2)), r.normal(size=(2,))],
     ad.linear, lambda x, w, b: x @ w + b),
    ("conv2d", False, lambda r: [r.normal(size=(2, 4, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))],
     lambda x, k, b: ad.conv2d(x, k, b, stride=1, pad=1), lambda x, k, b: conv2d_ref(x, k, b, 1, 1)),
    ("conv2d_strided", False, lambda r: [r.normal(size=(2, 6, 6)), r.normal(size=(2, 2, 4, 4))],
     lambda x, k: ad.conv2d(x, k, stride=2, pad=1), lambda x, k: conv2d_ref(x, k, None, 2, 1)),
    ("softmax", False, lambda r: [r.normal(size=(3, 4))], lambda a: ad.softmax(a, 1),
     lambda x: softmax_ref(x, 1)),
    ("pairwise_cosine", False, lambda r: [r.normal(size=(3, 4)), r.normal(size=(2, 4))],
     ad.pairwise_cosine,
     lambda a, b: np.array([[cosine_ref(u, v) for v in b] for u in a])),
    ("cosine_similarity", False, lambda r: [r.normal(size=(5,)), r.normal(size=(5,))],
     ad.cosine_similarity, lambda u, v: np.array(cosine_ref(u, v))),
]


def cross_entropy_case(rng):
    logits = rng.normal(size=(3, 4))
    labels = rng.integers(0, 4, size=3)
    weights = rng.uniform(0.5, 2.0, size=3)

    def ref(z):
        lp = np.log(softmax_ref(z, 1))
        return float(np.sum(-lp[np.arange(3), labels] * weights) / weights.sum())

    return logits, lambda t: ad.softmax_cross_entropy(t, labels, weights), ref


def check_op(case, seed: int):
    """Relative error between engine gradients and float64 finite differences, per input."""
    name, _elementwise, make, engine, ref = case
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(x, np.float64) for x in make(rng)]
    inputs32 = [x.astype(np.float32) for x in inputs]
    inputs = [x.astype(np.float64) for x in inputs32]
    tensors = [Tensor(x, requires_grad=True) for x in inputs32]
    out = engine(*tensors)
    weights = rng.normal(size=out.shape)
    loss = ad.tsum(out * Tensor(weights))
    grads = ad.backward(loss)
    errs = []
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = list(inputs)
            args[i] = xi
            return float(np.sum(np.asarray(ref(*args)) * weights))
        errs.append(rel_err(grads[tensors[i]], fd_grad(f, x)))
    return errs


def mlp_case(seed: int):
    """Random 3-layer perceptron: engine gradients of every parameter vs finite differences (h=1e-3)."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 5)).astype(np.float32)
    labels = rng.integers(0, 3, size=4)
    shapes = [(5, 6), (6,), (6, 6), (6,), (6, 3), (3,)]
    params = [rng.normal(0, 0.6, size=s).astype(np.float32) for s in shapes]

    def engine(ps):
        h = ad.sigmoid(ad.linear(Tensor(x), ps[0], ps[1]))
        h = ad.tabs(ad.linear(h, ps[2], ps[3]))
        return ad.softmax_cross_entropy(ad.linear(h, ps[4], ps[5]), labels)

    def ref(ps):
        h = 1 / (1 + np.exp(-(x.astype(np.float64) @ ps[0] + ps[1])))
        h = np.abs(h @ ps[2] + ps[3])
        lp = np.log(softmax_ref(h @ ps[4] + ps[5], 1))
        return float(-lp[np.arange(4), labels].mean())

    ts = [Tensor(p, requires_grad=True) for p in params]
    grads = ad.backward(engine(ts))
    p64 = [p.astype(np.float64) for p in params]
    errs = []
    for i in range(len(params)):
        def f(pi, i=i):
            ps = list(p64)
            ps[i] = pi
            return ref(ps)
        errs.append(rel_err(grads[ts[i]], fd_grad(f, p64[i], h=1e-3)))
    return errs


def conv_stack_case(seed: int):
    """conv -> relu -> conv -> mean: input and kernel gradients vs finite differences."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 6, 6)).astype(np.float32)
    k1 = rng.normal(0, 0.5, size=(3, 2, 3, 3)).astype(np.float32)
    k2 = rng.normal(0, 0.5, size=(2, 3, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 3, 3))

    def ref(xx, a, b):
        h = np.maximum(conv2d_ref(xx, a, None, 1, 1), 0)
        return float(np.sum(conv2d_ref(h, b, None, 2, 1) * w))

    tx, t1, t2 = (Tensor(v, requires_grad=True) for v in (x, k1, k2))
    out = ad.conv2d(ad.relu(ad.conv2d(tx, t1, pad=1)), t2, stride=2, pad=1)
    grads = ad.backward(ad.tsum(out * Tensor(w)))
    base = [v.astype(np.float64) for v in (x, k1, k2)]
    errs = []
    for i, t in enumerate((tx, t1, t2)):
        def f(v, i=i):
            args = list(base)
            args[i] = v
            return ref(*args)
        errs.append(rel_err(grads[t], fd_grad(f, base[i])))
    return errs


# ---------------------------------------------------------------------------
# metric oracles


def confusion_bruteforce(verdicts, labels):
    tp = fp = tn = fn = 0
    for v, y in zip(verdicts, labels):
        if v and y:
            tp += 1
        elif v and not y:
            fp += 1
        elif not v and not y:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def iou_ref(a, b):
    ax1, ax2 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay1, ay2 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx1, bx2 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by1, by2 = b[1] - b[3] / 2, b[1] + b[3] / 2
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def ap_exhaustive(preds, gts, thr):
    """Precision/recall recomputed from scratch at every cutoff, then the envelope integral.

    ``preds`` is a list of (confidence, box); matching at each cutoff is the
    same greedy rule, replayed over the top-k detections only.
    """
    if not gts:
        return None
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
    points = []
    for k in range(1, len(order) + 1):
        used = set()
        tp = 0
        for i in order[:k]:
            best, bj = -1.0, None
            for j, g in enumerate(gts):
                if j in used:
                    continue
                v = iou_ref(preds[i][1], g)
                if v > best:
                    best, bj = v, j
            if bj is not None and best >= thr:
                used.add(bj)
                tp += 1
        points.append((tp / len(gts), tp / k))
    # area: for each distinct recall level, precision = max precision at recall >= that level
    ap, prev = 0.0, 0.0
    for r in sorted({r for r, _ in points}):
        if r <= prev:
            continue
        p = max(pp for rr, pp in points if rr >= r)
        ap += (r - prev) * p
        prev = r
    return ap


# ---------------------------------------------------------------------------
# contrastive-loss oracle


def dcc_bruteforce(v, y, tau, denominator_mode="standard", selector_mode="text"):
    """Scalar double loop over the centre-shifted pair losses (float64 throughout)."""
    v = np.asarray(v, np.float64)
    n = len(y)
    centers = {c: v[[i for i in range(n) if y[i] == c]].mean(axis=0) for c in set(int(t) for t in y)}
    shifted = [v[i] - centers[int(y[i])] for i in range(n)]

    def ell(m, k):
        z = 0.0
        for o in range(n):
            if o == m:
                continue
            if denominator_mode == "as_written" and y[o] != y[m]:
                continue
            z += math.exp(cosine_ref(shifted[m], shifted[o]) / tau)
        if z == 0.0:
            return None
        return -math.log(math.exp(cosine_ref(shifted[m], shifted[k]) / tau) / z)

    total = 0.0
    for m, k in itertools.combinations(range(n), 2):
        positive = y[m] == y[k]
        take = positive if selector_mode == "text" else not positive
        if not take:
            continue
        val = ell(m, k)
        if val is not None:
            total += val
    return total / math.comb(n, 2), ell
