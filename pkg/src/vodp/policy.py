"""Full visuomotor policy: encoder -> fuser -> compressor -> diffusion head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tc
from .compressor import SceneCompressor
from .diffusion import NoiseNet, diffusion_loss, make_scheduler, sample
from .encoder import Encoder, PatchConfig
from .fuser import Fuser
from .nn import Module
from .tensor import Tensor


@dataclass(frozen=True)
class PolicyConfig:
    image_size: int = 64
    patch: int = 8
    width: int = 64
    heads: int = 4
    semantic_blocks: int = 2
    aa_blocks: int = 2
    scene_width: int = 64
    action_dim: int = 3
    history: int = 3
    horizon: int = 8
    diffusion_steps: int = 100
    noise_base: int = 64
    modality: str = "full"
    downsample: str = "pool"

    def patch_config(self) -> PatchConfig:
        return PatchConfig(
            image_h=self.image_size,
            image_w=self.image_size,
            patch=self.patch,
            width=self.width,
            heads=self.heads,
            aa_blocks=self.aa_blocks,
            semantic_blocks=self.semantic_blocks,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class MinMaxNormalizer:
    """Per-dimension affine map of [min, max] onto [-1, 1]."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        span = self.hi - self.lo
        # Constant dimensions map to 0 instead of dividing by zero.
        self.span = np.where(span > 1e-8, span, 2.0)
        self.center = np.where(span > 1e-8, self.lo, self.lo - 1.0)

    @classmethod
    def fit(cls, x: np.ndarray) -> "MinMaxNormalizer":
        x = x.reshape(-1, x.shape[-1])
        return cls(x.min(axis=0), x.max(axis=0))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (2.0 * (x - self.center) / self.span - 1.0).astype(np.asarray(x).dtype)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x) + 1.0) * 0.5 * self.span + self.center).astype(np.asarray(x).dtype)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo.copy(), self.hi.copy()


class ImageNormalizer:
    """Per-channel standardisation of RGB frames with dataset statistics.

    Demo frames are mostly flat background, so raw pixels bury the objects under
    a large constant; subtracting the channel mean makes them stand out.
    """

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(std, dtype=np.float64), 1e-3)

    @classmethod
    def fit(cls, frames) -> "ImageNormalizer":
        """``frames`` is an iterable of (..., 3) arrays; moments are pooled over all pixels."""
        n, s, ss = 0, np.zeros(3), np.zeros(3)
        for f in frames:
            x = np.asarray(f, dtype=np.float64).reshape(-1, 3)
            n += len(x)
            s += x.sum(0)
            ss += (x * x).sum(0)
        mean = s / n
        return cls(mean, np.sqrt(np.maximum(ss / n - mean * mean, 0.0)))

    def normalize(self, images: np.ndarray, dtype=np.float32) -> np.ndarray:
        return ((np.asarray(images) - self.mean.astype(dtype)) / self.std.astype(dtype)).astype(dtype)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.copy(), self.std.copy()


class VODPPolicy(Module):
    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.encoder = Encoder(
            cfg.patch_config(), rng, max_history=cfg.history, geometric=cfg.modality != "no_geo", dtype=dtype
        )
        self.fuser = Fuser(cfg.width, cfg.heads, rng, modality=cfg.modality, downsample=cfg.downsample, dtype=dtype)
        self.compressor = SceneCompressor(cfg.width, cfg.scene_width, rng, dtype=dtype)
        cond_dim = cfg.history * (cfg.scene_width + cfg.action_dim)
        self.noise_net = NoiseNet(cfg.action_dim, cfg.horizon, cond_dim, rng, base=cfg.noise_base, dtype=dtype)
        self.scheduler = make_scheduler(cfg.diffusion_steps)
        self.action_norm: MinMaxNormalizer | None = None
        self.state_norm: MinMaxNormalizer | None = None
        self.image_norm: ImageNormalizer | None = None

    def scene_features(self, images: np.ndarray, states: np.ndarray) -> Tensor:
        """images (B, T, H, W, 3), normalised states (B, T, J) -> h_sc (B, T, C' + J)."""
        b, t = images.shape[:2]
        if t != self.cfg.history or states.shape[:2] != (b, t) or states.shape[-1] != self.cfg.action_dim:
            raise tc.ShapeError(
                f"observation mismatch: images {images.shape}, states {states.shape}; "
                f"policy expects history {self.cfg.history} and J={self.cfg.action_dim}"
            )
        if self.image_norm is not None:
            images = self.image_norm.normalize(images, self.dtype)
        h_sem, h_geo = self.encoder(images)
        fused = self.fuser(h_geo, h_sem)
        return self.compressor(fused, Tensor(np.asarray(states, dtype=self.dtype)))

    def condition(self, images: np.ndarray, states: np.ndarray) -> Tensor:
        h_sc = self.scene_features(images, states)
        return h_sc.reshape(h_sc.shape[0], -1)

    def loss(self, images: np.ndarray, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> Tensor:
        cond = self.condition(images, states)
        return diffusion_loss(self.noise_net, self.scheduler, cond, np.asarray(actions, dtype=self.dtype), rng)

    def sample_normalized(self, images: np.ndarray, states: np.ndarray, rngs) -> np.ndarray:
        with tc.no_grad():
            cond = self.condition(images, states)
        shape = (self.cfg.horizon, self.cfg.action_dim)
        return sample(self.noise_net, self.scheduler, cond, shape, rngs, dtype=self.dtype)

    def act(self, images: np.ndarray, raw_states: np.ndarray, rngs) -> np.ndarray:
        """Raw observations in, denormalised (B, N, J) action chunks out."""
        if self.action_norm is None or self.state_norm is None:
            raise RuntimeError("normalisation statistics are not set")
        states = self.state_norm.normalize(np.asarray(raw_states, dtype=np.float64)).astype(self.dtype)
        a = self.sample_normalized(images, states, rngs)
        return self.action_norm.denormalize(a.astype(np.float64))
