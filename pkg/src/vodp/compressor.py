"""Fused tokens -> per-frame scene vector [MLP(pooled conv features), proprioception]."""

from __future__ import annotations

import numpy as np

from . import tensor as tc
from .encoder import ConfigError, TokenGrid
from .nn import Conv2d, Linear, Module
from .tensor import Tensor


def to_grid(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """(..., P, C) row-major tokens -> (..., C, H_P, W_P)."""
    *lead, p, c = tokens.shape
    gh, gw = grid
    if gh * gw != p:
        raise tc.ShapeError(f"grid {gh}x{gw} cannot hold {p} tokens")
    x = tokens.reshape(*lead, gh, gw, c)
    n = len(lead)
    return x.transpose(*range(n), n + 2, n, n + 1)


def from_grid(x: Tensor) -> Tensor:
    """Inverse of :func:`to_grid`."""
    *lead, c, gh, gw = x.shape
    n = len(lead)
    return x.transpose(*range(n), n + 1, n + 2, n).reshape(*lead, gh * gw, c)


class ResidualBlock(Module):
    """conv3x3(s2) -> GELU -> conv3x3(s1), plus a strided 1x1 shortcut."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, rng, stride=2, padding=1, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, stride=1, padding=1, dtype=dtype)
        self.shortcut = Conv2d(channels, channels, 1, rng, stride=2, padding=0, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.shortcut(x) + self.conv2(tc.gelu(self.conv1(x)))


class SceneCompressor(Module):
    def __init__(self, width: int, out_width: int, rng: np.random.Generator, stages: int = 3, dtype=np.float32):
        self.width = width
        self.out_width = out_width
        self.blocks = [ResidualBlock(width, rng, dtype=dtype) for _ in range(stages)]
        self.mlp = Linear(width, out_width, rng, dtype=dtype)

    def spatial_chain(self, h: int, w: int) -> list[tuple[int, int]]:
        sizes = [(h, w)]
        for _ in self.blocks:
            h, w = tc.conv_out_size(h, 3, 2, 1), tc.conv_out_size(w, 3, 2, 1)
            sizes.append((h, w))
        return sizes

    def residual_downsample(self, x: Tensor) -> Tensor:
        """(F, C, H_P, W_P) -> (F, C, 1, 1)."""
        if min(x.shape[-2:]) < 2:
            raise ConfigError(f"spatial grid {x.shape[-2:]} too small to downsample")
        for block in self.blocks:
            x = block(x)
        return tc.adaptive_avg_pool_2d(x, (1, 1))

    def scene_concat(self, h_sp: Tensor, state: Tensor) -> Tensor:
        """[GELU(Linear(h_sp)), S] along the feature axis; S is passed through untouched."""
        if h_sp.shape[:-1] != state.shape[:-1]:
            raise tc.ShapeError(f"spatial feature {h_sp.shape} and state {state.shape} disagree on leading dims")
        return tc.concat([tc.gelu(self.mlp(h_sp)), state], axis=-1)

    def forward(self, fused: TokenGrid, state: Tensor) -> Tensor:
        """fused (B, T, P, C), state (B, T, J) -> h_sc (B, T, C' + J)."""
        b, t, p, c = fused.tokens.shape
        grid = to_grid(fused.tokens, fused.grid).reshape(b * t, c, *fused.grid)
        h_sp = self.residual_downsample(grid).reshape(b, t, c)
        return self.scene_concat(h_sp, state)
