"""Window multi-head self-attention (W-MSA) and its shifted variant (SW-MSA)."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .nn import Linear, Module, Parameter, trunc_normal
from .tensor import Tensor, add, crop, matmul, mul, pad, permute, reshape, softmax, take
from .windowing import (WindowSet, _shift_mask, cyclic_shift, padding_mask,
                        window_partition, window_reverse)

HEADS = 4


@lru_cache(maxsize=64)
def relative_index(k_eff: int, k_table: int) -> np.ndarray:
    """``(k_eff^2, k_eff^2)`` indices into a ``(2*k_table - 1)^2`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(k_eff), np.arange(k_eff), indexing="ij"))
    coords = coords.reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (k_table - 1)
    return rel[0] * (2 * k_table - 1) + rel[1]


class WindowAttention(Module):
    def __init__(self, dim: int, window_size: int, rng, heads: int = HEADS,
                 rel_pos_bias: bool = True):
        if dim % heads:
            raise ShapeError(f"channel dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window_size = window_size
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.rel_bias = (Parameter(trunc_normal(rng, ((2 * window_size - 1) ** 2, heads)))
                         if rel_pos_bias else None)

    def bias(self, k_eff: int) -> Tensor | None:
        """Relative position bias ``(heads, N, N)`` for a window of side ``k_eff``."""
        if self.rel_bias is None:
            return None
        b = take(self.rel_bias, relative_index(k_eff, self.window_size))
        return permute(b, (2, 0, 1))


def attention_probs(xw: Tensor, layer: WindowAttention, k_eff: int, batch: int,
                    mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Attention weights ``(batch * nW, h, N, N)`` and values ``(batch * nW, h, N, d)``."""
    bn, n, c = xw.shape
    h = layer.heads
    d = c // h
    qkv = layer.qkv(xw)
    qkv = permute(reshape(qkv, (bn, n, 3, h, d)), (2, 0, 3, 1, 4))
    q = mul(crop(qkv, (0,)), layer.scale)
    k = crop(qkv, (1,))
    v = crop(qkv, (2,))
    logits = matmul(q, permute(k, (0, 1, 3, 2)))  # (bn, h, n, n)
    bias = layer.bias(k_eff)
    if mask is not None:
        nw = mask.shape[0]
        extra = Tensor(mask[:, None, :, :].astype(xw.dtype, copy=False))
        if bias is not None:
            extra = add(reshape(bias, (1, h, n, n)), extra)
        logits = reshape(add(reshape(logits, (batch, nw, h, n, n)), extra), (bn, h, n, n))
    elif bias is not None:
        logits = add(logits, bias)
    return softmax(logits, axis=-1), v


def window_attention(xw: Tensor, layer: WindowAttention, k_eff: int, batch: int,
                     mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d) + bias + mask) V per window and head, then proj.

    ``xw`` is ``(batch * nW, N, C)``; ``mask`` is ``(nW, N, N)`` or ``None``.
    """
    bn, n, c = xw.shape
    attn, v = attention_probs(xw, layer, k_eff, batch, mask)
    out = permute(matmul(attn, v), (0, 2, 1, 3))
    return layer.proj(reshape(out, (bn, n, c)))


def wmsa(ws: WindowSet, layer: WindowAttention, mask: np.ndarray | None = None) -> WindowSet:
    """Attention inside each window of ``ws``; shape preserved."""
    k = ws.window_size
    if k > layer.window_size:
        raise ShapeError(f"wmsa: window {k} exceeds the layer's window size {layer.window_size}")
    out = window_attention(ws.tensor, layer, k, ws.grid_dims[0], mask)
    return WindowSet(out, k, ws.grid_dims)


def window_plan(h: int, w: int, k: int, shifted: bool) -> tuple[int, int, int, int]:
    """Effective window side, shift, and padded grid size for an ``h x w`` grid.

    The window shrinks to the grid when the grid is smaller than it, and a
    single window covering the whole grid is never shifted.
    """
    k_eff = min(k, h, w)
    hp = -(-h // k_eff) * k_eff
    wp = -(-w // k_eff) * k_eff
    single = hp == k_eff and wp == k_eff
    shift = k_eff // 2 if shifted and not single else 0
    return k_eff, shift, hp, wp


def swmsa(x: Tensor, layer: WindowAttention, shifted: bool = True) -> Tensor:
    """(S)W-MSA over a ``(B, H, W, C)`` grid: shift, partition, attend, reverse, unshift."""
    b, h, w, c = x.shape
    k_eff, shift, hp, wp = window_plan(h, w, layer.window_size, shifted)
    if hp != h or wp != w:
        x = pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    if shift:
        x = cyclic_shift(x, (-shift, -shift))
    mask = None
    if shift:
        mask = _shift_mask(hp, wp, k_eff, shift)
    if hp != h or wp != w:
        pm = padding_mask(h, w, hp, wp, k_eff, shift)
        mask = pm if mask is None else mask + pm
    ws = wmsa(window_partition(x, k_eff), layer, mask)
    y = window_reverse(ws)
    if shift:
        y = cyclic_shift(y, (shift, shift))
    if hp != h or wp != w:
        y = crop(y, (slice(None), slice(0, h), slice(0, w)))
    return y
