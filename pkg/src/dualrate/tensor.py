"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every differentiable operation records its parents and
a closure holding the backward rule, and ``backward`` on a scalar loss runs
the closures in reverse topological order. Supported broadcasting is kept
deliberately narrow so each backward rule stays auditable: scalar-vs-tensor,
and trailing-shape addition (bias / positional-table style). Anything wider
must go through an explicit ``expand``.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the gradient graph (non-scalar loss, repeated backward, ...)."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise GraphError(f"item() needs a scalar tensor, got shape {self.data.shape}")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False):
    """Accumulate into t.grad.

    ``fresh`` marks arrays the calling closure just built (or views of the
    consumer's spent gradient buffer) that no other tensor will alias, so they
    can be adopted without a defensive copy. Shared references, like an add
    passing its own gradient to both parents, must stay non-fresh.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    The graph is single-shot: a second backward through the same loss raises.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass")
    loss._consumed = True

    topo: list[Tensor] = []
    seen: dict[int, bool] = {}
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen[id(node)] = True
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise / broadcast ops


def _trailing_match(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _const_broadcastable(target: tuple, shape: tuple) -> bool:
    try:
        return np.broadcast_shapes(target, shape) == target
    except ValueError:
        return False


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim == 0 or a.data.ndim == 0 or a.data.shape == b.data.shape:
        pass
    elif _trailing_match(a.data.shape, b.data.shape):
        pass
    elif _trailing_match(b.data.shape, a.data.shape):
        a, b = b, a
    elif not b.requires_grad and _const_broadcastable(a.data.shape, b.data.shape):
        pass  # constants (e.g. attention masks) may broadcast freely
    else:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")
    out_data = a.data + b.data

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, g if a.data.shape == g.shape else g.sum(), fresh=a.data.shape != g.shape)
        if b.requires_grad:
            if b.data.shape == g.shape:
                _accum(b, g)
            elif b.data.ndim == 0:
                _accum(b, g.sum(), fresh=True)
            else:
                extra = g.ndim - b.data.ndim
                _accum(b, g.sum(axis=tuple(range(extra))), fresh=True)

    out = _make(out_data, (a, b), _bw)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def _bw():
        _accum(a, -out.grad, fresh=True)

    out = _make(-a.data, (a,), _bw)
    return out


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not (a.data.shape == b.data.shape or a.data.ndim == 0 or b.data.ndim == 0):
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out_data = a.data * b.data

    def _bw():
        g = out.grad
        if a.requires_grad:
            ga = g * b.data
            _accum(a, ga if a.data.ndim else ga.sum(), fresh=True)
        if b.requires_grad:
            gb = g * a.data
            _accum(b, gb if b.data.ndim == g.ndim else gb.sum(), fresh=True)

    out = _make(out_data, (a, b), _bw)
    return out


def expand(x, axis: int, n: int) -> Tensor:
    """Repeat a length-1 axis ``n`` times; backward sums back over it."""
    x = _as_tensor(x)
    if x.data.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} of shape {x.data.shape} is not 1")
    reps = [1] * x.data.ndim
    reps[axis] = n

    def _bw():
        _accum(x, out.grad.sum(axis=axis, keepdims=True), fresh=True)

    out = _make(np.tile(x.data, reps), (x,), _bw)
    return out


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only through the interior."""
    x = _as_tensor(x)
    mask = (x.data > lo) & (x.data < hi)

    def _bw():
        _accum(x, out.grad * mask, fresh=True)

    out = _make(np.clip(x.data, lo, hi), (x,), _bw)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)

    def _bw():
        w = 1.0 - s
        w *= s
        w *= out.grad
        _accum(x, w, fresh=True)

    out = _make(s, (x,), _bw)
    return out


def gelu(x) -> Tensor:
    """Gaussian-error linear unit, tanh form."""
    x = _as_tensor(x)
    d = x.data
    d2 = d * d
    t = d2 * _GELU_CUBIC
    t += 1.0
    t *= d
    t *= _SQRT_2_OVER_PI
    np.tanh(t, out=t)

    def _bw():
        w = t * t
        np.subtract(1.0, w, out=w)
        w *= d
        dinner = d2 * (3.0 * _GELU_CUBIC)
        dinner += 1.0
        dinner *= _SQRT_2_OVER_PI
        w *= dinner
        w += t
        w += 1.0
        w *= 0.5
        w *= out.grad
        _accum(x, w, fresh=True)

    val = t + 1.0
    val *= d
    val *= 0.5
    out = _make(val, (x,), _bw)
    return out


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, log-sum-exp stable.

    Targets must be exactly 0 or 1.
    """
    x = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce_with_logits: targets must be 0 or 1")
    if y.shape != x.data.shape:
        raise ShapeError(f"bce_with_logits: logits {x.data.shape} vs targets {y.shape}")
    d = x.data
    val = np.maximum(d, 0.0) - d * y + np.log1p(np.exp(-np.abs(d)))

    def _bw():
        s = 1.0 / (1.0 + np.exp(-np.clip(d, -700, 700)))
        _accum(x, out.grad * (s - y), fresh=True)

    out = _make(val, (x,), _bw)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def _bw():
        g = out.grad
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape))

    out = _make(out_data, (x,), _bw)
    return out


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape

    def _bw():
        _accum(x, out.grad.reshape(old), fresh=True)

    out = _make(x.data.reshape(shape), (x,), _bw)
    return out


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _as_tensor(x)

    def _bw():
        _accum(x, out.grad.swapaxes(a, b), fresh=True)

    out = _make(np.ascontiguousarray(x.data.swapaxes(a, b)), (x,), _bw)
    return out


def split_heads(x, heads: int) -> Tensor:
    """[B, L, d] -> [B, heads, L, d / heads] in one graph node."""
    x = _as_tensor(x)
    b, length, d = x.data.shape
    hd = d // heads

    def _bw():
        _accum(x, out.grad.swapaxes(1, 2).reshape(b, length, d), fresh=True)

    out = _make(
        np.ascontiguousarray(x.data.reshape(b, length, heads, hd).swapaxes(1, 2)),
        (x,), _bw,
    )
    return out


def merge_heads(x) -> Tensor:
    """[B, heads, L, hd] -> [B, L, heads * hd], inverse of split_heads."""
    x = _as_tensor(x)
    b, heads, length, hd = x.data.shape

    def _bw():
        _accum(x, out.grad.reshape(b, length, heads, hd).swapaxes(1, 2), fresh=True)

    out = _make(
        np.ascontiguousarray(x.data.swapaxes(1, 2)).reshape(b, length, heads * hd),
        (x,), _bw,
    )
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _bw():
        for p, g in zip(parts, np.split(out.grad, splits, axis=axis)):
            _accum(p, g, fresh=True)

    out = _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), _bw)
    return out


def slice_(x, key) -> Tensor:
    """Basic indexing (ints and slices) with scatter-style backward."""
    x = _as_tensor(x)

    def _bw():
        g = np.zeros_like(x.data)
        g[key] = out.grad
        _accum(x, g, fresh=True)

    out = _make(np.ascontiguousarray(x.data[key]), (x,), _bw)
    return out


def embed_lookup(table, ids) -> Tensor:
    """Gather rows of an embedding table by integer id."""
    table = _as_tensor(table)
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"embed_lookup: token id out of range [0, {table.data.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )

    def _bw():
        g = np.zeros_like(table.data)
        np.add.at(g, idx, out.grad)
        _accum(table, g, fresh=True)

    out = _make(table.data[idx], (table,), _bw)
    return out


# ---------------------------------------------------------------------------
# linear algebra / normalization


def matmul(a, b) -> Tensor:
    """Matrix product. 2-D x 2-D, or stacked: [..., m, k] x [k, n] shares the
    right operand across leading axes; [..., m, k] x [..., k, n] needs equal
    leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {da.shape} x {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {da.shape} x {db.shape}")
    shared_rhs = db.ndim == 2 and da.ndim > 2
    if not shared_rhs and da.shape[:-2] != db.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions disagree: {da.shape} x {db.shape}")

    if shared_rhs:
        k = da.shape[-1]
        out_data = (da.reshape(-1, k) @ db).reshape(da.shape[:-1] + (db.shape[-1],))
    else:
        out_data = da @ db

    def _bw():
        g = out.grad
        if a.requires_grad:
            if shared_rhs:
                n = db.shape[-1]
                ga = (g.reshape(-1, n) @ db.T).reshape(da.shape)
            else:
                ga = g @ db.swapaxes(-1, -2)
            _accum(a, ga, fresh=True)
        if b.requires_grad:
            if shared_rhs:
                k = da.shape[-1]
                n = db.shape[-1]
                gb = da.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = da.swapaxes(-1, -2) @ g
            _accum(b, gb, fresh=True)

    out = _make(out_data, (a, b), _bw)
    return out


def affine(x, w, b=None) -> Tensor:
    """x @ w + b in one node; x may carry leading batch axes."""
    x, w = _as_tensor(x), _as_tensor(w)
    dx, dw = x.data, w.data
    if dx.shape[-1] != dw.shape[0]:
        raise ShapeError(f"affine: inner dimensions disagree: {dx.shape} x {dw.shape}")
    k, n = dw.shape
    x2 = dx.reshape(-1, k)
    val = x2 @ dw
    if b is not None:
        b = _as_tensor(b)
        val += b.data
    val = val.reshape(dx.shape[:-1] + (n,))
    parents = (x, w) if b is None else (x, w, b)

    def _bw():
        g2 = out.grad.reshape(-1, n)
        if x.requires_grad:
            _accum(x, (g2 @ dw.T).reshape(dx.shape), fresh=True)
        if w.requires_grad:
            _accum(w, x2.T @ g2, fresh=True)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0), fresh=True)

    out = _make(val, parents, _bw)
    return out


def scale_shift(x, g, s) -> Tensor:
    """Per-channel modulation: x[..., t, c] * g[..., c] + s[..., c].

    g and s have one axis fewer than x; both broadcast over the token axis.
    """
    x, g, s = _as_tensor(x), _as_tensor(g), _as_tensor(s)
    if g.data.shape != s.data.shape or g.data.shape != x.data.shape[:-2] + x.data.shape[-1:]:
        raise ShapeError(
            f"scale_shift: x {x.data.shape} needs gain/shift of shape "
            f"{x.data.shape[:-2] + x.data.shape[-1:]}, got {g.data.shape} / {s.data.shape}"
        )
    ge = g.data[..., None, :]
    val = x.data * ge
    val += s.data[..., None, :]

    def _bw():
        go = out.grad
        if x.requires_grad:
            _accum(x, go * ge, fresh=True)
        if g.requires_grad:
            _accum(g, np.einsum("...tc,...tc->...c", go, x.data), fresh=True)
        if s.requires_grad:
            _accum(s, go.sum(axis=-2), fresh=True)

    out = _make(val, (x, g, s), _bw)
    return out


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis, max-shifted for stability."""
    x = _as_tensor(x)
    s = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def _bw():
        g = out.grad
        w = g * s
        w -= w.sum(axis=-1, keepdims=True) * s
        _accum(x, w, fresh=True)

    out = _make(s, (x,), _bw)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gain + bias.

    eps = 0 is accepted for width > 1 (exact normalization in tests); a width
    of 1 with eps = 0 would divide by zero and is rejected.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if eps < 0:
        raise ValueError("layer_norm: eps must be >= 0")
    if d == 1 and eps == 0:
        raise ValueError("layer_norm: width 1 with eps=0 divides by zero variance")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.data.shape} / {bias.data.shape}"
        )
    inv_d = 1.0 / d
    mu = x.data.sum(axis=-1, keepdims=True)
    mu *= inv_d
    xhat = x.data - mu
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None]
    var *= inv_d
    var += eps
    inv = np.sqrt(var)
    np.reciprocal(inv, out=inv)
    xhat *= inv

    def _bw():
        g = out.grad
        if gain.requires_grad:
            gr = g.reshape(-1, d)
            _accum(gain, np.einsum("ni,ni->i", gr, xhat.reshape(-1, d)), fresh=True)
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0), fresh=True)
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.sum(axis=-1, keepdims=True)
            m1 *= inv_d
            m2 = np.einsum("...i,...i->...", dxhat, xhat)[..., None]
            m2 *= inv_d
            dxhat -= m1
            dxhat -= m2 * xhat
            dxhat *= inv
            _accum(x, dxhat, fresh=True)

    val = xhat * gain.data
    val += bias.data
    out = _make(val, (x, gain, bias), _bw)
    return out
