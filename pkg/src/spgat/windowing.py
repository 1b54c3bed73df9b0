"""Token plumbing: patch (un)embedding, merging/combining, windows, shifts, masks.

All grids are channels-last ``(B, H, W, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor, permute, reshape, roll

MASK_VALUE = -1e9
PATCH = 2


@dataclass
class TokenGrid:
    tensor: Tensor
    stage_scale: int

    @property
    def shape(self):
        return self.tensor.shape


@dataclass
class WindowSet:
    tensor: Tensor  # (B * nW, k * k, C)
    window_size: int
    grid_dims: tuple  # (B, H, W)


# ---------------------------------------------------------------- embedding

class PatchEmbed(Module):
    """Non-overlapping 2x2 patches, flattened (dy, dx, c), projected to ``dim``."""

    def __init__(self, in_ch: int, dim: int, rng):
        self.in_ch = in_ch
        self.proj = Linear(PATCH * PATCH * in_ch, dim, rng)

    def __call__(self, img: Tensor) -> TokenGrid:
        b, h, w, c = img.shape
        if c != self.in_ch:
            raise ShapeError(f"patch_embed: expected {self.in_ch} channels, got {c}")
        if h % PATCH or w % PATCH:
            raise ShapeError(f"patch_embed: image {h}x{w} is not divisible by {PATCH}; "
                             f"pad the input first (see pad_to_multiple)")
        x = reshape(img, (b, h // PATCH, PATCH, w // PATCH, PATCH, c))
        x = permute(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (b, h // PATCH, w // PATCH, PATCH * PATCH * c))
        return TokenGrid(self.proj(x), PATCH)


class PatchUnembed(Module):
    """Inverse of :class:`PatchEmbed`: project to 2*2*out_ch and rearrange."""

    def __init__(self, dim: int, out_ch: int, rng):
        self.out_ch = out_ch
        self.proj = Linear(dim, PATCH * PATCH * out_ch, rng)

    def __call__(self, grid: TokenGrid) -> Tensor:
        if grid.stage_scale != PATCH:
            raise ShapeError(f"patch_unembed: grid is at scale {grid.stage_scale}, expected {PATCH}")
        b, h, w, _ = grid.shape
        x = self.proj(grid.tensor)
        x = reshape(x, (b, h, w, PATCH, PATCH, self.out_ch))
        x = permute(x, (0, 1, 3, 2, 4, 5))
        return reshape(x, (b, h * PATCH, w * PATCH, self.out_ch))


class PatchMerge(Module):
    """2x downsampling: concat each 2x2 neighbourhood (TL, BL, TR, BR), LN, Linear 4C->2C."""

    def __init__(self, dim: int, rng):
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, 2 * dim, rng)

    def __call__(self, grid: TokenGrid) -> TokenGrid:
        b, h, w, c = grid.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch_merge: grid {h}x{w} has an odd side")
        x = reshape(grid.tensor, (b, h // 2, 2, w // 2, 2, c))
        x = permute(x, (0, 1, 3, 4, 2, 5))  # (b, h/2, w/2, dx, dy, c)
        x = reshape(x, (b, h // 2, w // 2, 4 * c))
        return TokenGrid(self.reduce(self.norm(x)), grid.stage_scale * 2)


class PatchCombine(Module):
    """2x upsampling: Linear 2C->4C, then spread 4C over a 2x2 neighbourhood of C."""

    def __init__(self, dim: int, rng):
        self.out_dim = dim // 2
        self.expand = Linear(dim, 2 * dim, rng)

    def __call__(self, grid: TokenGrid) -> TokenGrid:
        b, h, w, _ = grid.shape
        c = self.out_dim
        x = self.expand(grid.tensor)
        x = reshape(x, (b, h, w, 2, 2, c))  # (.., dx, dy, c)
        x = permute(x, (0, 1, 4, 2, 3, 5))  # (b, h, dy, w, dx, c)
        return TokenGrid(reshape(x, (b, 2 * h, 2 * w, c)), grid.stage_scale // 2)


# ---------------------------------------------------------------- windows

def window_partition(x: Tensor, k: int) -> WindowSet:
    b, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"window_partition: grid {h}x{w} is not divisible by window {k}")
    t = reshape(x, (b, h // k, k, w // k, k, c))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return WindowSet(reshape(t, (b * (h // k) * (w // k), k * k, c)), k, (b, h, w))


def window_reverse(ws: WindowSet) -> Tensor:
    b, h, w = ws.grid_dims
    k = ws.window_size
    c = ws.tensor.shape[-1]
    t = reshape(ws.tensor, (b, h // k, w // k, k, k, c))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, h, w, c))


def partition_array(x: np.ndarray, k: int) -> np.ndarray:
    """Same remap as :func:`window_partition` on a plain ``(B, H, W, ...)`` array."""
    b, h, w = x.shape[:3]
    rest = x.shape[3:]
    t = x.reshape((b, h // k, k, w // k, k) + rest)
    t = t.transpose((0, 1, 3, 2, 4) + tuple(range(5, 5 + len(rest))))
    return t.reshape((b * (h // k) * (w // k), k * k) + rest)


def cyclic_shift(x: Tensor, shift: tuple[int, int]) -> Tensor:
    """Toroidal roll of the two spatial axes; undo with the negated offsets."""
    return roll(x, tuple(shift), (1, 2))


def build_shift_mask(h: int, w: int, k: int, shift: int) -> np.ndarray:
    """Additive mask ``(nW, k*k, k*k)`` for a grid rolled by ``(-shift, -shift)``.

    Entries are 0 where both tokens come from the same pre-shift region and
    ``MASK_VALUE`` otherwise.
    """
    return _shift_mask(h, w, k, shift).copy()


@lru_cache(maxsize=128)
def _shift_mask(h: int, w: int, k: int, shift: int) -> np.ndarray:
    n = (h // k) * (w // k)
    if shift == 0:
        return np.zeros((n, k * k, k * k), dtype=np.float32)
    region = region_ids(h, w, k, shift)
    ids = partition_array(region[None, :, :], k)  # (nW, k*k)
    same = ids[:, :, None] == ids[:, None, :]
    return np.where(same, 0.0, MASK_VALUE).astype(np.float32)


def region_ids(h: int, w: int, k: int, shift: int) -> np.ndarray:
    """Region label per token of the shifted grid (up to 9 regions)."""
    region = np.zeros((h, w), dtype=np.int64)
    cuts = (slice(0, -k), slice(-k, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = label
            label += 1
    return region


@lru_cache(maxsize=128)
def padding_mask(h: int, w: int, hp: int, wp: int, k: int, shift: int) -> np.ndarray:
    """Additive mask ``(nW, k*k, k*k)`` hiding zero-padded key tokens."""
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    if shift:
        valid = np.roll(valid, (-shift, -shift), (0, 1))
    keys = partition_array(valid[None], k)  # (nW, k*k)
    mask = np.where(keys[:, None, :], 0.0, MASK_VALUE).astype(np.float32)
    return np.broadcast_to(mask, (keys.shape[0], k * k, k * k)).copy()


def pad_to_multiple(img: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad ``(B, H, W, C)`` bottom/right to a multiple; returns original (H, W)."""
    h, w = img.shape[1:3]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img, (h, w)
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(img, ((0, 0), (0, ph), (0, pw), (0, 0)), mode=mode), (h, w)
