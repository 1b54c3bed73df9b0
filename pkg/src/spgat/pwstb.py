"""Parallel-windows Swin transformer block.

One block runs two attention stages. Each stage normalises its input once,
feeds it to a parallel branch per window size, and sums the branches with the
residual; an MLP stage follows each attention stage. The first attention
stage uses regular windows, the second uses shifted windows.
"""
from __future__ import annotations

from typing import Sequence

from .attention import HEADS, WindowAttention, swmsa
from .nn import LayerNorm, Mlp, Module
from .tensor import Tensor, add

DEFAULT_WINDOWS = (2, 4, 8)


class PwStbBlock(Module):
    def __init__(self, dim: int, rng, windows: Sequence[int] = DEFAULT_WINDOWS,
                 heads: int = HEADS, rel_pos_bias: bool = True):
        if not windows:
            raise ValueError("windows must be non-empty")
        self.dim = dim
        self.windows = tuple(windows)
        self.ln1 = LayerNorm(dim)
        self.w_branches = [WindowAttention(dim, k, rng, heads, rel_pos_bias) for k in windows]
        self.ln2 = LayerNorm(dim)
        self.mlp1 = Mlp(dim, rng)
        self.ln3 = LayerNorm(dim)
        self.sw_branches = [WindowAttention(dim, k, rng, heads, rel_pos_bias) for k in windows]
        self.ln4 = LayerNorm(dim)
        self.mlp2 = Mlp(dim, rng)

    @staticmethod
    def _parallel(x: Tensor, normed: Tensor, branches, shifted: bool) -> Tensor:
        # fixed branch order keeps the float sum reproducible
        acc = None
        for layer in branches:
            y = swmsa(normed, layer, shifted)
            acc = y if acc is None else add(acc, y)
        return add(acc, x)

    def __call__(self, z: Tensor) -> Tensor:
        zh = self._parallel(z, self.ln1(z), self.w_branches, shifted=False)
        z = add(self.mlp1(self.ln2(zh)), zh)
        zh = self._parallel(z, self.ln3(z), self.sw_branches, shifted=True)
        return add(self.mlp2(self.ln4(zh)), zh)


def pwstb_forward(z: Tensor, block: PwStbBlock) -> Tensor:
    return block(z)
