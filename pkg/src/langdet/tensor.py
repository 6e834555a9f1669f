"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op checks shapes explicitly; nothing broadcasts implicitly. Ops that do
expand one operand along leading axes (``add_broadcast``, ``matmul`` with a
shared right-hand matrix) say so in their name or docstring.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

COSINE_EPS = 1e-12
KL_FLOOR = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array that can take part in a differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
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

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def backward(self) -> None:
        """Populate ``.grad`` on every requires-grad leaf reachable from this scalar."""
        if self.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        order = tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; all forward to strict-shape functions below
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a: Tensor, s: float) -> Tensor:
    return _result(a.data * s, (a,), lambda g: (g * s,))


def elementwise_sum(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("elementwise_sum needs at least one tensor")
    for t in tensors[1:]:
        _same_shape("elementwise_sum", tensors[0], t)
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data = data + t.data
    return _result(data, tuple(tensors), lambda g: tuple(g for _ in tensors))


def add_broadcast(x: Tensor, y: Tensor) -> Tensor:
    """x + y where y's shape equals the trailing axes of x's shape."""
    if y.ndim > x.ndim or x.shape[x.ndim - y.ndim:] != y.shape:
        raise ShapeError(f"add_broadcast: {y.shape} is not a trailing shape of {x.shape}")
    lead = x.ndim - y.ndim

    def grad_fn(g):
        return g, g.sum(axis=tuple(range(lead))) if lead else g

    return _result(x.data + y.data, (x, y), grad_fn)


def mul_broadcast(x: Tensor, y: Tensor) -> Tensor:
    """x * y where y's shape equals the trailing axes of x's shape."""
    if y.ndim > x.ndim or x.shape[x.ndim - y.ndim:] != y.shape:
        raise ShapeError(f"mul_broadcast: {y.shape} is not a trailing shape of {x.shape}")
    lead = x.ndim - y.ndim

    def grad_fn(g):
        gy = g * x.data
        return g * y.data, gy.sum(axis=tuple(range(lead))) if lead else gy

    return _result(x.data * y.data, (x, y), grad_fn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("maximum", a, b)
    pick_a = a.data >= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (g * pick_a, g * ~pick_a))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("minimum", a, b)
    pick_a = a.data <= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (g * pick_a, g * ~pick_a))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sin(x: Tensor) -> Tensor:
    return _result(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return _result(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / np.sqrt(2.0 * np.pi)
    return _result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


# shape ops ------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ShapeError(f"concat: shape mismatch {ref.shape} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)))


def _has_array_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing (``x[key]``); repeated indices accumulate."""
    out = x.data[key]
    fancy = _has_array_index(key)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _result(np.array(out, dtype=np.float64), (x,), grad_fn)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    key = [slice(None)] * x.ndim
    key[axis] = slice(start, stop)
    return index(x, tuple(key))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim

    def grad_fn(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _result(np.take(x.data, idx, axis=ax), (x,), grad_fn)


def pick(x: Tensor, cols) -> Tensor:
    """Row-wise selection ``x[r, cols[r]]`` from an (n, k) tensor."""
    if x.ndim != 2:
        raise ShapeError(f"pick expects a 2-d tensor, got {x.shape}")
    cols = np.asarray(cols, dtype=np.int64)
    if cols.shape != (x.shape[0],):
        raise ShapeError(f"pick: {cols.shape} indices for {x.shape[0]} rows")
    rows = np.arange(x.shape[0])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[rows, cols] = g
        return (full,)

    return _result(x.data[rows, cols], (x,), grad_fn)


# reductions -------------------------------------------------------------------


def _expand_grad(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(x_shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x_shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out, dtype=np.float64), (x,),
                   lambda g: (_expand_grad(g, x.shape, axis, keepdims).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.data.size / max(np.asarray(out).size, 1)
    return _result(np.asarray(out, dtype=np.float64), (x,),
                   lambda g: (_expand_grad(g, x.shape, axis, keepdims) / n,))


# linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepted forms: (m,k)@(k,n); (...,m,k)@(k,n) with the right matrix shared
    across leading axes; (...,m,k)@(...,k,n) with identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # fold leading axes into one 2-d product; much faster than numpy's batched path
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*a.shape[:-1], b.shape[1])

        def grad_fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), grad_fn)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _result(out, (a, b), lambda g: (g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None,
                                           np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias along the last axis); weight is (in, out)."""
    y = matmul(x, weight)
    return add_broadcast(y, bias) if bias is not None else y


# normalisation and probability ------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} for features {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), grad_fn)


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out / temperature,)

    return _result(out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    return _result(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood of integer ``targets`` under (n, k) logits."""
    logp = pick(log_softmax(logits, axis=-1), targets)
    n = logits.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"cross_entropy: weights {w.shape} for {n} rows")
    return scale(sum_(mul(logp, Tensor(w))), -1.0 / w.sum())


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every vector along the last axis to unit length."""
    norm = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norm <= COSINE_EPS):
        raise ValueError("l2_normalize: zero-norm input (degenerate embedding)")
    out = x.data / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _result(out, (x,), grad_fn)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    return index(cosine_rows(a, reshape(b, (1, -1))), 0)


def cosine_rows(v: Tensor, m: Tensor) -> Tensor:
    """Cosine between vector ``v`` (e,) and every row of ``m`` (n, e)."""
    if v.ndim != 1 or m.ndim != 2 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"cosine_rows: vector {v.shape} against matrix {m.shape}")
    nv = np.linalg.norm(v.data)
    nm = np.linalg.norm(m.data, axis=1)
    if nv <= COSINE_EPS or np.any(nm <= COSINE_EPS):
        raise ValueError("cosine_similarity: zero-norm input (degenerate embedding)")
    dots = m.data @ v.data
    raw = dots / (nm * nv)
    out = np.clip(raw, -1.0, 1.0)

    def grad_fn(g):
        # d cos / d v = m_r/(|m_r||v|) - cos * v/|v|^2
        gv = (g / (nm * nv)) @ m.data - (g * raw).sum() * v.data / nv**2
        gm = np.outer(g / (nm * nv), v.data) - (g * raw / nm**2)[:, None] * m.data
        return gv, gm

    return _result(out, (v, m), grad_fn)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Sum p * log(p / q); q is floored at ``KL_FLOOR`` before the log, 0 log 0 = 0."""
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: length mismatch {p.shape} vs {q.shape}")
    qf = np.maximum(q.data, KL_FLOOR)
    pos = p.data > 0
    logp = np.log(np.where(pos, p.data, 1.0))
    out = np.sum(np.where(pos, p.data * (logp - np.log(qf)), 0.0))

    def grad_fn(g):
        gp = g * np.where(pos, logp - np.log(qf) + 1.0, 0.0)
        gq = -g * p.data / qf * (q.data >= KL_FLOOR)
        return gp, gq

    return _result(np.asarray(out, dtype=np.float64), (p, q), grad_fn)


# convolution ------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution on NCHW input with (out, in, k, k) weights."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} for {weight.shape[0]} channels")
    bsz, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    # cols: (B, oh, ow, cin*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, oh, ow, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 3, 1, 2)

    def grad_fn(g):
        gt = g.transpose(0, 2, 3, 1)  # (B, oh, ow, cout)
        gw = (gt.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(bsz, oh, ow, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        gb = gt.sum(axis=(0, 1, 2)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(np.ascontiguousarray(out), parents, grad_fn)


# gradient oracle --------------------------------------------------------------


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                     coords: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (NaN at skipped coords)."""
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    targets = range(flat.size) if coords is None else coords
    with no_grad():
        for k in targets:
            orig = flat[k]
            flat[k] = orig + h
            fp = f(x).item()
            flat[k] = orig - h
            fm = f(x).item()
            flat[k] = orig
            out[k] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|)."""
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h must lie in [1e-6, 1e-3], got {h}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    if loss.ndim != 0:
        raise ShapeError(f"finite_difference_check needs a scalar function, got {loss.shape}")
    loss.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    numeric = numeric_gradient(f, leaf, h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
