"""Parameterised layers: Linear, LayerNorm, GELU MLP, and a small Module base."""
from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from .errors import ShapeError
from .tensor import DEFAULT_DTYPE, Tensor, _make

LN_EPS = 1e-5
MLP_RATIO = 4
INIT_STD = 0.02
_GELU_C = float(np.sqrt(2.0 / np.pi))


class Parameter(Tensor):
    """A trainable tensor owned by a Module."""
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD,
                 dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(dtype)


class Module:
    """Parameters are discovered by walking attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter converted to ``dtype``."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone


# ---------------------------------------------------------------- fused ops

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input width {xd.shape[-1]} != weight rows {wd.shape[0]} "
                         f"(x {xd.shape}, W {wd.shape})")
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out_shape = xd.shape[:-1] + (wd.shape[1],)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("linear", out.reshape(out_shape), inputs, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    xd = x.data
    c = xd.shape[-1]
    if gamma.shape != (c,):
        raise ShapeError(f"layer_norm: channel dim {c} != gamma length {gamma.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, c).sum(axis=0)
        return gx, ggamma, gbeta

    return _make("layer_norm", out, (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 * 0.044715 x^2)
        d = t * t
        np.subtract(1.0, d, out=d)
        du = x2 * (3 * 0.044715)
        du += 1.0
        d *= du
        d *= xd
        d *= 0.5 * _GELU_C
        du = t + 1.0
        du *= 0.5
        d += du
        d *= g
        return (d,)

    return _make("gelu", out, (x,), bw)


# ---------------------------------------------------------------- layers

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out, dtype=DEFAULT_DTYPE)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(dim, dtype=DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = MLP_RATIO):
        self.fc1 = Linear(dim, dim * ratio, rng)
        self.fc2 = Linear(dim * ratio, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
