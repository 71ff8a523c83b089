"""Reverse-mode automatic differentiation on numpy float64 arrays.

A Tensor wraps an ndarray plus an optional tape node (parents + backward
closure).  Graphs are built eagerly; ``Tensor.backward()`` walks the tape in
reverse topological order.  Everything runs in float64; file formats are the
only place 32-bit values appear.

Broadcasting is restricted to leading batch dimensions: an operand may be
expanded along leading axes (e.g. a ``(D,)`` bias against a ``(B, T, D)``
activation) but elementwise ops never broadcast interior axes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "add", "sub", "mul", "matmul", "linear", "transpose", "reshape",
    "slice_", "pad2d", "concat", "take", "gather_tokens", "expand", "mean",
    "sum_", "layer_norm", "softmax", "attention", "gelu", "dropout",
    "mse_loss", "cross_entropy", "conv2d",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def backward(self, grad=None):
        """Accumulate gradients of a scalar (or seeded) output into leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without seed requires a scalar output, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): _as_array(grad)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _toposort(root: Tensor):
    # Iterative DFS; graphs from long training loops overflow recursion limits.
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_leading_broadcast(a_shape, b_shape, op: str):
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    tail = big[len(big) - len(small):] if small else ()
    ok = all(s == t or s == 1 for s, t in zip(small, tail))
    if not ok:
        raise ValueError(f"{op}: incompatible shapes {a_shape} and {b_shape}")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape, "multiply")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        ga = np.matmul(g, bt)
        ga = _unbroadcast(ga, a.shape)
        at = np.swapaxes(a.data, -1, -2)
        if b.data.ndim == 2 and a.data.ndim > 2:
            k = a.data.shape[-1]
            m = g.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.matmul(at, g)
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b; saves one tape node per projection."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    y = np.matmul(x.data, w.data)
    if b is not None:
        y += b.data

    def backward(g):
        k = x.data.shape[-1]
        m = w.data.shape[1]
        gx = np.matmul(g, w.data.T)
        gw = x.data.reshape(-1, k).T @ g.reshape(-1, m)
        gb = None if b is None else g.reshape(-1, m).sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, backward)


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(t.data, axes), (t,),
                 lambda g: (np.transpose(g, inv),))


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = t.data.shape
    return _make(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def slice_(t: Tensor, index) -> Tensor:
    """Basic (non-fancy) slicing; backward scatters into a zero tensor."""
    def backward(g):
        full = np.zeros_like(t.data)
        full[index] = g
        return (full,)

    return _make(t.data[index], (t,), backward)


def pad2d(t: Tensor, width: int) -> Tensor:
    """Zero-pad the two interior (height, width) axes of an NHWC tensor."""
    pads = ((0, 0), (width, width), (width, width), (0, 0))
    sl = (slice(None), slice(width, -width), slice(width, -width), slice(None))
    return _make(np.pad(t.data, pads), (t,), lambda g: (g[sl],))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def take(t: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with a shared 1-D index list."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        return (full,)

    return _make(np.take(t.data, indices, axis=axis), (t,), backward)


def gather_tokens(t: Tensor, idx) -> Tensor:
    """Per-sample token gather: out[b, i, :] = t[b, idx[b, i], :]."""
    idx = np.asarray(idx, dtype=np.intp)
    if t.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != t.data.shape[0]:
        raise ValueError(f"gather_tokens: incompatible shapes {t.shape} and {idx.shape}")
    b_ix = np.arange(t.data.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, (b_ix, idx), g)
        return (full,)

    return _make(t.data[b_ix, idx], (t,), backward)


def expand(t: Tensor, shape) -> Tensor:
    """Broadcast along leading / size-1 axes (mask-token tiling)."""
    shape = tuple(shape)
    _check_leading_broadcast(t.shape, shape, "expand")
    return _make(np.broadcast_to(t.data, shape).copy(), (t,),
                 lambda g: (_unbroadcast(g, t.shape),))


def sum_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, t.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, t.data.shape).copy(),)

    return _make(t.data.sum(axis=axis, keepdims=keepdims), (t,), backward)


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = t.data.size
    else:
        n = t.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, t.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, t.data.shape).copy(),)

    return _make(t.data.mean(axis=axis, keepdims=keepdims), (t,), backward)


# ---------------------------------------------------------------------------
# neural-net ops (fused forwards with hand-written backwards)

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if gamma.data.shape != x.data.shape[-1:] or beta.data.shape != x.data.shape[-1:]:
        raise ValueError(
            f"layer_norm: feature shapes {gamma.shape}/{beta.shape} do not match input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def backward(g):
        d = x.data.shape[-1]
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(y, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (x,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """Fused scaled-dot-product attention over (..., tokens, head_dim)."""
    if q.data.shape[-1] != k.data.shape[-1] or k.data.shape[-2] != v.data.shape[-2]:
        raise ValueError(
            f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    kt = np.swapaxes(k.data, -1, -2)
    scores = np.matmul(q.data, kt) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(probs, v.data)

    def backward(g):
        gv = np.matmul(np.swapaxes(probs, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
        gq = np.matmul(ds, k.data) * scale
        gk = np.matmul(np.swapaxes(ds, -1, -2), q.data) * scale
        return gq, gk, gv

    return _make(out, (q, k, v), backward)


def gelu(x: Tensor) -> Tensor:
    # Exact erf form; keeps finite-difference checks tight.
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(y, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def mse_loss(pred: Tensor, target, weight=None) -> Tensor:
    """Mean squared error; with `weight` the mean runs over weighted cells only."""
    tgt = target.data if isinstance(target, Tensor) else _as_array(target)
    if tgt.shape != pred.data.shape:
        raise ValueError(f"mse_loss: shapes {pred.shape} and {tgt.shape} differ")
    diff = pred.data - tgt
    if weight is None:
        n = diff.size
        loss = (diff * diff).sum() / n
        return _make(np.asarray(loss), (pred,), lambda g: (g * 2.0 * diff / n,))
    w = _as_array(weight)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("mse_loss: weight mask selects no cells")
    loss = (w * diff * diff).sum() / denom
    return _make(np.asarray(loss), (pred,), lambda g: (g * 2.0 * w * diff / denom,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy for integer labels of shape (batch,)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ValueError(
            f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(e.sum(axis=1)))
    loss = nll.mean()

    def backward(g):
        gl = p.copy()
        gl[np.arange(n), labels] -= 1.0
        return (g * gl / n,)

    return _make(np.asarray(loss), (logits,), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 same-padding NHWC convolution, composed from slice/linear ops."""
    if w.data.shape[:2] != (3, 3) or w.data.shape[2] != x.data.shape[-1]:
        raise ValueError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    n, h, wd, _ = x.data.shape
    xp = pad2d(x, 1)
    out = None
    for dy in range(3):
        for dx in range(3):
            patch = slice_(xp, (slice(None), slice(dy, dy + h), slice(dx, dx + wd), slice(None)))
            tap = matmul(patch, slice_(w, (dy, dx)))
            out = tap if out is None else add(out, tap)
    if b is not None:
        out = add(out, b)
    return out
