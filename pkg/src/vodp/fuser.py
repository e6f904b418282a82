"""Per-frame semantic/geometric fusion by residual cross-attention.

Geometric tokens are narrowed from 2C to C (pairwise feature pooling or a
learned projection) and act as queries over the frame's semantic tokens:

    h1 = down(g)
    h2 = h1 + CrossAttn(h1 W_Q, s W_K, s W_V)
    out = h2 + FFN(h2)

No normalisation layers are inserted. The ``no_geo`` / ``no_sem`` modes drop
the attention entirely and keep only the FFN residual on the surviving branch.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tc
from .encoder import TokenGrid
from .nn import FeedForward, Linear, Module, MultiHeadAttention
from .tensor import Tensor

MODALITIES = ("full", "no_geo", "no_sem")
DOWNSAMPLE_MODES = ("pool", "mlp")


class Fuser(Module):
    def __init__(
        self,
        width: int,
        heads: int,
        rng: np.random.Generator,
        modality: str = "full",
        downsample: str = "pool",
        dtype=np.float32,
    ):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
        if downsample not in DOWNSAMPLE_MODES:
            raise ValueError(f"unknown downsample mode {downsample!r}; expected one of {DOWNSAMPLE_MODES}")
        self.width = width
        self.modality = modality
        self.downsample = downsample
        self.down = None
        if downsample == "mlp" and modality != "no_geo":
            self.down = Linear(2 * width, width, rng, dtype=dtype)
        self.attn = None
        if modality == "full":
            self.attn = MultiHeadAttention(width, heads, rng, scale=1.0 / math.sqrt(width), dtype=dtype)
        self.ffn = FeedForward(width, rng, dtype=dtype)

    def downsample_geo(self, g: Tensor) -> Tensor:
        """(..., P, 2C) -> (..., P, C)."""
        if g.shape[-1] != 2 * self.width:
            raise tc.ShapeError(f"geometric tokens must be {2 * self.width} wide, got {g.shape[-1]}")
        if self.downsample == "pool":
            return tc.avg_pool_1d(g, kernel=2, stride=2)
        return self.down(g)

    def fuse_frame(self, g: Tensor, s: Tensor) -> Tensor:
        """g (F, P, 2C) queries s (F, P, C); F independent frames."""
        h1 = self.downsample_geo(g)
        h2 = h1 + self.attn(h1, s)
        return h2 + self.ffn(h2)

    def forward(self, h_geo: TokenGrid | None, h_sem: TokenGrid | None) -> TokenGrid:
        """Fuse (B, T, P, 2C) geometric and (B, T, P, C) semantic tokens into (B, T, P, C)."""
        if self.modality == "no_geo":
            self._check(h_sem, self.width, "semantic")
            x = h_sem.tokens
            return TokenGrid(x + self.ffn(x), h_sem.grid)
        self._check(h_geo, 2 * self.width, "geometric")
        b, t, p, _ = h_geo.tokens.shape
        if self.modality == "no_sem":
            h1 = self.downsample_geo(h_geo.tokens)
            return TokenGrid(h1 + self.ffn(h1), h_geo.grid)
        self._check(h_sem, self.width, "semantic")
        if h_sem.tokens.shape[:3] != (b, t, p):
            raise tc.ShapeError(f"frame/token mismatch: geometric {h_geo.tokens.shape} vs semantic {h_sem.tokens.shape}")
        g = h_geo.tokens.reshape(b * t, p, 2 * self.width)
        s = h_sem.tokens.reshape(b * t, p, self.width)
        return TokenGrid(self.fuse_frame(g, s).reshape(b, t, p, self.width), h_geo.grid)

    def _check(self, grid: TokenGrid | None, width: int, what: str) -> None:
        shape = None if grid is None else grid.tokens.shape
        if shape is None or len(shape) != 4 or shape[-1] != width:
            raise tc.ShapeError(f"{self.modality} fusion expects {what} tokens (B, T, P, {width}), got {shape}")
