"""Layer primitives built on :mod:`tadprop.numerics.tensor`."""
from __future__ import annotations

import math

import numpy as np

from .tensor import (DTYPE, DimensionError, Parameter, Tensor, _make, concat, matmul,
                     pad_axis, relu, tensor)


def linear_forward(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    x = tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
    out = matmul(x, w)
    return out if b is None else out + b


def softmax_stable(x, axis: int = -1) -> Tensor:
    x = tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), backward)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply ``gain`` and ``bias``."""
    x = tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), backward)


def conv1d_same(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Zero-padded temporal convolution.

    x: (..., T, C_in); w: (K, C_in, C_out) with odd K. Output keeps T.
    """
    x = tensor(x)
    k = w.shape[0]
    t = x.shape[-2]
    half = k // 2
    xp = pad_axis(x, x.ndim - 2, half, half)
    cols = concat([xp[..., i:i + t, :] for i in range(k)], axis=-1)
    out = matmul(cols, w.reshape(k * w.shape[1], w.shape[2]))
    return out if b is None else out + b


def sinusoidal_table(length: int, dim: int, offset: int = 0) -> np.ndarray:
    """Fixed sine/cosine position table, shape (length, dim)."""
    pos = np.arange(offset, offset + length, dtype=DTYPE)[:, None]
    i = np.arange(dim, dtype=DTYPE)[None, :]
    rate = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    ang = pos * rate
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


# ---------------------------------------------------------------------------
# parameter containers

class Module:
    """Holds named parameters and child modules."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name=name)
        self._params[name] = p
        return p

    def add_child(self, name: str, mod: "Module") -> "Module":
        self._children[name] = mod
        return mod

    def named_parameters(self, prefix: str = ""):
        for n, p in self._params.items():
            yield prefix + n, p
        for cn, c in self._children.items():
            yield from c.named_parameters(prefix + cn + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Uniform init with variance gain / fan_in (gain 2 ahead of a ReLU)."""
    bound = math.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, gain: float = 1.0):
        super().__init__()
        self.w = self.add_param("w", fan_in_uniform(rng, (d_in, d_out), d_in, gain))
        self.b = self.add_param("b", np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        return linear_forward(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param("gain", np.ones(d))
        self.bias = self.add_param("bias", np.zeros(d))

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 gain: float = 1.0):
        super().__init__()
        fan = c_in * kernel
        self.w = self.add_param("w", fan_in_uniform(rng, (kernel, c_in, c_out), fan, gain))
        self.b = self.add_param("b", np.zeros(c_out))

    def __call__(self, x) -> Tensor:
        return conv1d_same(x, self.w, self.b)


class MLP(Module):
    """Stack of linear layers with ReLU between (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        super().__init__()
        last = len(dims) - 2
        self.layers = [self.add_child(f"l{i}", Linear(a, b, rng, 1.0 if i == last else 2.0))
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x
