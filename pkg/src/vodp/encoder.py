"""Visual encoder producing semantic (width C) and geometric (width 2C) tokens.

Images are cut into non-overlapping patches in row-major order, embedded
linearly with a learned positional table, refined per frame by standard
transformer blocks (semantic tokens), then passed through alternating
attention blocks. Each alternating block runs a frame-wise layer (attention
inside one frame) and then a global layer (attention over every token of
every frame). Geometric tokens concatenate both outputs of the last block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .nn import Linear, Module, Parameter, TransformerBlock
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    image_h: int = 64
    image_w: int = 64
    patch: int = 8
    width: int = 64
    heads: int = 4
    aa_blocks: int = 2
    semantic_blocks: int = 2

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.width % self.heads:
            raise ConfigError(f"token width {self.width} not divisible by {self.heads} heads")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch


@dataclass
class TokenGrid:
    tokens: Tensor  # (..., T, P, width)
    grid: tuple[int, int]

    def __post_init__(self):
        if self.grid[0] * self.grid[1] != self.tokens.shape[-2]:
            raise tc.ShapeError(f"grid {self.grid} does not cover {self.tokens.shape[-2]} tokens")

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., P, 3*patch*patch), patches top-left first, row-major.

    Each patch vector is laid out as (row, col, channel).
    """
    *lead, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    x = x.transpose(order)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, patch * patch * c))


class PatchEmbed(Module):
    def __init__(self, cfg: PatchConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.proj = Linear(cfg.patch_dim, cfg.width, rng, dtype=dtype)
        self.pos = Parameter((0.02 * rng.standard_normal((cfg.num_patches, cfg.width))).astype(dtype))

    def forward(self, patches: Tensor) -> Tensor:
        return self.proj(patches) + self.pos


class AABlock(Module):
    def __init__(self, cfg: PatchConfig, rng: np.random.Generator, dtype=np.float32):
        self.frame = TransformerBlock(cfg.width, cfg.heads, rng, dtype=dtype)
        self.glob = TransformerBlock(cfg.width, cfg.heads, rng, dtype=dtype)

    def forward(self, tokens: Tensor, key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """tokens (B, T, P, C) -> (frame_feat, global_feat), both (B, T, P, C).

        ``key_mask`` (B, T*P) excludes keys from the global layer only.
        """
        b, t, p, c = tokens.shape
        frame = self.frame(tokens.reshape(b * t, p, c)).reshape(b, t, p, c)
        glob = self.glob(frame.reshape(b, t * p, c), key_mask=key_mask).reshape(b, t, p, c)
        return frame, glob


class Encoder(Module):
    def __init__(
        self,
        cfg: PatchConfig,
        rng: np.random.Generator,
        max_history: int = 3,
        geometric: bool = True,
        dtype=np.float32,
    ):
        self.cfg = cfg
        self.dtype = dtype
        self.embed = PatchEmbed(cfg, rng, dtype=dtype)
        self.semantic = [TransformerBlock(cfg.width, cfg.heads, rng, dtype=dtype) for _ in range(cfg.semantic_blocks)]
        # The geometric branch is omitted entirely when the fuser never reads it.
        self.frame_embed = None
        self.aa = []
        if geometric:
            self.frame_embed = Parameter((0.02 * rng.standard_normal((max_history, cfg.width))).astype(dtype))
            self.aa = [AABlock(cfg, rng, dtype=dtype) for _ in range(cfg.aa_blocks)]

    @property
    def has_geometry(self) -> bool:
        return bool(self.aa)

    def semantic_encode(self, patches: Tensor) -> TokenGrid:
        """(B, T, P, 3p^2) patches -> semantic tokens (B, T, P, C); frames never mix."""
        b, t, p, _ = patches.shape
        x = self.embed(patches).reshape(b * t, p, self.cfg.width)
        for block in self.semantic:
            x = block(x)
        return TokenGrid(x.reshape(b, t, p, self.cfg.width), self.cfg.grid)

    def geometric_encode(self, h_sem: TokenGrid, key_mask: np.ndarray | None = None) -> TokenGrid:
        if not self.aa:
            raise RuntimeError("encoder was built without the geometric branch")
        x = h_sem.tokens
        t = x.shape[1]
        if t > self.frame_embed.shape[0]:
            raise ConfigError(f"history {t} exceeds frame embedding capacity {self.frame_embed.shape[0]}")
        x = x + self.frame_embed[:t].reshape(1, t, 1, self.cfg.width)
        frame = glob = x
        for block in self.aa:
            frame, glob = block(glob, key_mask=key_mask)
        return TokenGrid(tc.concat([frame, glob], axis=-1), h_sem.grid)

    def forward(self, images: np.ndarray) -> tuple[TokenGrid, TokenGrid | None]:
        """images (B, T, H, W, 3) in [0, 1] -> (h_sem, h_geo or None)."""
        patches = Tensor(patchify(np.asarray(images, dtype=self.dtype), self.cfg.patch))
        h_sem = self.semantic_encode(patches)
        h_geo = self.geometric_encode(h_sem) if self.aa else None
        return h_sem, h_geo
