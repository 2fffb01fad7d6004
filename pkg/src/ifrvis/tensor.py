"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when it was produced by a
differentiable operation, keeps references to its parents together with a
closure that maps the output gradient to parent gradients.  The graph is
built dynamically on every forward pass and consumed by :func:`backward`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DegenerateRowError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "linear",
    "sigmoid",
    "relu",
    "log",
    "exp",
    "power",
    "clamp",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "swapaxes",
    "concat",
    "concat_rows",
    "chunk",
    "chunk_rows",
    "stack",
    "take",
    "softmax",
    "softmax_rows",
    "layer_norm",
    "conv2d",
    "bce_with_logits",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """Raised when a softmax row has no admissible entry."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# graph traversal


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), _bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``[p, q]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    xd, wd = x.data, w.data
    p, q = wd.shape
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, p)
    out = x2 @ wd
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (q,):
            raise ShapeError(f"linear bias shape {b.shape} does not match w {w.shape}")
        out += b.data

    def _bw(g):
        g2 = g.reshape(-1, q)
        gx = (g2 @ wd.T).reshape(lead + (p,))
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(lead + (q,)), parents, _bw)


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def power(x, p: float) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    p = float(p)
    return _make(xd**p, (x,), lambda g: (g * p * xd ** (p - 1.0),))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against constant targets."""
    x = _as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if x.shape != t.shape:
        raise ShapeError(f"bce shape mismatch: {x.shape} vs {t.shape}")
    xd = x.data
    out = np.maximum(xd, 0.0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    prob = np.exp(-np.logaddexp(0.0, -xd))
    return _make(out, (x,), lambda g: (g * (prob - t),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), _bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = _as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat shape mismatch: {ref} vs {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=ax),
        tuple(ts),
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def concat_rows(a, b) -> Tensor:
    """Stack the rows of ``b`` under those of ``a`` (axis -2)."""
    return concat([a, b], axis=-2)


def chunk(x, parts: int, axis: int = 0) -> list:
    x = _as_tensor(x)
    n = x.shape[axis]
    if parts < 1 or n % parts:
        raise ShapeError(f"cannot chunk length {n} into {parts} equal parts")
    step = n // parts
    ax = axis % x.ndim
    out = []
    for i in range(parts):
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(i * step, (i + 1) * step)
        out.append(take(x, tuple(sl)))
    return out


def chunk_rows(x, parts: int) -> list:
    return chunk(x, parts, axis=-2)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack shape mismatch: {ts[0].shape} vs {t.shape}")
    ax = axis % (ts[0].ndim + 1)
    return _make(
        np.stack([t.data for t in ts], axis=ax),
        tuple(ts),
        lambda g: tuple(np.moveaxis(g, ax, 0)),
    )


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take(x, idx) -> Tensor:
    """Differentiable ``x[idx]`` for basic and integer-array indexing."""
    x = _as_tensor(x)
    shape = x.shape
    basic = _is_basic_index(idx)

    def _bw(g):
        gx = np.zeros(shape)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), _bw)


# ---------------------------------------------------------------------------
# fused numerics


def softmax(x, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax; ``mask`` entries that are False get weight 0.

    ``-inf`` entries in ``x`` are treated the same way as masked entries.
    """
    x = _as_tensor(x)
    logits = x.data
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    m = np.max(logits, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateRowError("softmax row has every entry masked or -inf")
    e = np.exp(logits - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), _bw)


def softmax_rows(x, mask: Optional[np.ndarray] = None) -> Tensor:
    return softmax(x, axis=-1, mask=mask)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit (population) variance, then apply affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def _bw(g):
        ggam = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggam, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), _bw)


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on channels-last input.

    ``x`` is ``[..., H, W, Cin]``, ``w`` is ``[k, k, Cin, Cout]`` and ``b`` is ``[Cout]``.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    k, k2, cin, cout = w.shape
    if k != k2 or x.shape[-1] != cin or b.shape != (cout,):
        raise ShapeError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    lead = x.shape[:-3]
    H, W = x.shape[-3], x.shape[-2]
    xd = x.data.reshape((-1, H, W, cin))
    pad = ((0, 0), (padding, padding), (padding, padding), (0, 0))
    xp = np.pad(xd, pad) if padding else xd
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d input {x.shape} too small for kernel {k}")
    cols = np.empty((xd.shape[0], Ho, Wo, k, k, cin))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
    cols2 = cols.reshape(-1, k * k * cin)
    wd = w.data.reshape(k * k * cin, cout)
    out = (cols2 @ wd + b.data).reshape(lead + (Ho, Wo, cout))

    def _bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wd.T).reshape(cols.shape)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += gcols[:, :, :, i, j, :]
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding, :]
        return gxp.reshape(x.shape), gw, gb

    return _make(out, (x, w, b), _bw)


# ---------------------------------------------------------------------------
# finite-difference utilities


def numerical_gradient(
    f: Callable[[], Tensor],
    param: Tensor,
    indices: Optional[Iterable] = None,
    h: float = 1e-5,
) -> dict:
    """Central differences of the scalar ``f()`` w.r.t. selected entries of ``param``."""
    flat = param.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[int(i)] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
