"""Layers built on the tensor core: linear, conv, norm, attention, encodings."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; parameters are discovered by attribute traversal."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{k}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 bias: bool = True, zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else xavier(rng, d_in, d_out, (d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = param(rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, kernel, kernel)))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, num: int, dim: int):
        self.weight = param(rng.normal(0.0, 1.0, (num, dim)))

    def __call__(self, ids) -> Tensor:
        return T.take(self.weight, np.asarray(ids, dtype=np.int64), axis=0)


def activation(name: str):
    return {"relu": T.relu, "gelu": T.gelu}[name]


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int, act: str = "relu"):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(activation(self.act)(self.fc1(x)))


class MultiheadAttention(Module):
    """Scaled dot-product attention over (B, T, dim) inputs.

    ``__call__`` returns the output and the (B, heads, Tq, Tk) attention weights. An
    optional additive ``bias`` of shape (B, Tq, Tk) is added to every head's logits.
    """

    def __init__(self, rng, dim: int, heads: int, zero_out: bool = False):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, dim, dim)
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim, zero_init=zero_out)
        self.dim = dim
        self.heads = heads

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if query.ndim != 3 or key.ndim != 3 or value.ndim != 3:
            raise T.ShapeError(f"attention expects (B, T, dim) inputs, got {query.shape}, {key.shape}")
        if query.shape[-1] != self.dim or key.shape[-1] != self.dim or value.shape[-1] != self.dim:
            raise T.ShapeError(
                f"attention dim mismatch: query {query.shape}, key {key.shape}, "
                f"value {value.shape}, model dim {self.dim}")
        if key.shape[:2] != value.shape[:2] or key.shape[0] != query.shape[0]:
            raise T.ShapeError(f"attention key/value mismatch: {key.shape} vs {value.shape}")
        b, tq, _ = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(self.dim // self.heads))
        if bias is not None:
            if bias.shape != (b, tq, key.shape[1]):
                raise T.ShapeError(f"attention bias {bias.shape} != {(b, tq, key.shape[1])}")
            per_head = bias.reshape(b, 1, tq, key.shape[1])
            scores = T.add(scores, T.concat([per_head] * self.heads, axis=1))
        weights = T.softmax(scores, axis=-1)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, self.dim)
        return self.out_proj(ctx), weights


def sinusoid_1d(length: int, dim: int) -> np.ndarray:
    """Standard 1-d sinusoidal encoding, (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange((dim + 1) // 2)[None, :]
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return pe


def sinusoid_2d(height: int, width: int, dim: int) -> np.ndarray:
    """2-d encoding: first half of channels encodes y, second half x; (H*W, dim), row-major."""
    half = dim // 2
    py = sinusoid_1d(height, half)
    px = sinusoid_1d(width, dim - half)
    pe = np.concatenate([
        np.repeat(py[:, None, :], width, axis=1),
        np.repeat(px[None, :, :], height, axis=0),
    ], axis=-1)
    return pe.reshape(height * width, dim)


def sinusoid_points(points: Tensor, dim: int, grid: tuple[int, int]) -> Tensor:
    """Differentiable 2-d encoding of continuous (cx, cy) in [0, 1], shape (..., 2) -> (..., dim).

    Uses the layout and frequencies of :func:`sinusoid_2d`, with coordinates expressed in
    feature-grid cells, so a point at a cell centre gets exactly that cell's encoding.
    """
    height, width = grid
    parts = []
    for axis, size, n in ((1, height, dim // 2), (0, width, dim - dim // 2)):
        k = (n + 1) // 2
        freq = 1.0 / (10000.0 ** (2 * np.arange(k) / n))
        coord = T.slice_(points, points.ndim - 1, axis, axis + 1)
        pos = T.add(T.scale(coord, float(size)), Tensor(np.full(coord.shape, -0.5)))
        ang = T.matmul(pos, Tensor(freq[None, :]))
        both = T.concat([T.sin(ang), T.cos(ang)], axis=-1)
        order = np.stack([np.arange(k), k + np.arange(k)], axis=1).reshape(-1)[:n]
        parts.append(T.take(both, order, axis=both.ndim - 1))
    return T.concat(parts, axis=-1)
