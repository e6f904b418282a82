"""DDPM action head: cosine-squared schedule, noise-prediction network, sampler.

The reverse update is written as

    a_{k-1} = alpha_k * (a_k - gamma_k * eps_theta(a_k, k, cond)) + sigma_k * z

with alpha_k = 1/sqrt(1 - beta_k), gamma_k = beta_k / sqrt(1 - abar_k) and
sigma_k^2 the posterior variance beta_k * (1 - abar_{k-1}) / (1 - abar_k),
which vanishes at k = 1. Steps are 1-based; arrays below are indexed k - 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .nn import Conv1d, Linear, Module
from .tensor import Tensor

BETA_MIN = 1e-4
BETA_MAX = 0.999


@dataclass(frozen=True)
class SchedulerState:
    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    step_scale: np.ndarray  # alpha in the reverse update: 1 / sqrt(alpha_k)
    gamma: np.ndarray
    kind: str = "cosine"

    def check_step(self, k: int) -> None:
        if not 1 <= k <= self.K:
            raise ValueError(f"diffusion step {k} outside [1, {self.K}]")


def make_scheduler(K: int, kind: str = "cosine", s: float = 0.008) -> SchedulerState:
    """Squared-cosine schedule with betas clipped to [1e-4, 0.999]."""
    if K < 2:
        raise ValueError(f"need at least 2 diffusion steps, got {K}")
    if kind != "cosine":
        raise ValueError(f"unknown schedule {kind!r}; only 'cosine' is supported")
    t = np.arange(K + 1, dtype=np.float64) / K
    f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    beta = np.clip(1.0 - f[1:] / f[:-1], BETA_MIN, BETA_MAX)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
    return SchedulerState(
        K=K,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=sigma,
        step_scale=1.0 / np.sqrt(alpha),
        gamma=beta / np.sqrt(1.0 - alpha_bar),
        kind=kind,
    )


def add_noise(sched: SchedulerState, a0: np.ndarray, eps: np.ndarray, k) -> np.ndarray:
    """sqrt(abar_k) a0 + sqrt(1 - abar_k) eps; ``k`` may be an int or one step per batch row."""
    k = np.asarray(k)
    abar = sched.alpha_bar[k - 1].reshape(k.shape + (1,) * (a0.ndim - k.ndim))
    return (np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * eps).astype(a0.dtype)


def denoise_step(
    sched: SchedulerState,
    a_k: np.ndarray,
    k: int,
    eps_pred: np.ndarray,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse step given the predicted noise. ``noise`` is a standard-normal draw, or None for sigma = 0."""
    sched.check_step(k)
    i = k - 1
    out = sched.step_scale[i] * (a_k - sched.gamma[i] * eps_pred)
    if noise is not None and sched.sigma[i] > 0:
        out = out + sched.sigma[i] * noise
    return out.astype(a_k.dtype)


def timestep_embedding(k: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(k, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(dtype)


class CondResBlock(Module):
    """conv -> GELU -> FiLM(cond) -> conv -> GELU, plus a (1x1) residual path."""

    def __init__(self, cin: int, cout: int, cond_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.cout = cout
        self.conv1 = Conv1d(cin, cout, 3, rng, dtype=dtype)
        self.film = Linear(cond_dim, 2 * cout, rng, dtype=dtype)
        self.conv2 = Conv1d(cout, cout, 3, rng, dtype=dtype)
        self.skip = Conv1d(cin, cout, 1, rng, dtype=dtype) if cin != cout else None

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = tc.gelu(self.conv1(x))
        film = self.film(cond)
        b = film.shape[0]
        scale = film[:, : self.cout].reshape(b, self.cout, 1)
        shift = film[:, self.cout :].reshape(b, self.cout, 1)
        h = h * (scale + 1.0) + shift
        h = tc.gelu(self.conv2(h))
        return h + (self.skip(x) if self.skip is not None else x)


class NoiseNet(Module):
    """Temporal conv encoder-decoder over the horizon axis (N -> N/2 -> N/4 and back).

    Conditioned by feature-wise affine modulation on [step embedding, flattened scene features].
    """

    def __init__(
        self,
        action_dim: int,
        horizon: int,
        cond_dim: int,
        rng: np.random.Generator,
        base: int = 64,
        step_dim: int = 64,
        dtype=np.float32,
    ):
        if horizon % 4:
            raise ValueError(f"horizon {horizon} must be divisible by 4 for the 3-level network")
        self.action_dim = action_dim
        self.horizon = horizon
        self.step_dim = step_dim
        self.dtype = dtype
        self.step_fc1 = Linear(step_dim, 4 * step_dim, rng, dtype=dtype)
        self.step_fc2 = Linear(4 * step_dim, step_dim, rng, dtype=dtype)
        full_cond = cond_dim + step_dim
        self.enc1 = CondResBlock(action_dim, base, full_cond, rng, dtype=dtype)
        self.down1 = Conv1d(base, base, 3, rng, stride=2, padding=1, dtype=dtype)
        self.enc2 = CondResBlock(base, 2 * base, full_cond, rng, dtype=dtype)
        self.down2 = Conv1d(2 * base, 2 * base, 3, rng, stride=2, padding=1, dtype=dtype)
        self.mid = CondResBlock(2 * base, 2 * base, full_cond, rng, dtype=dtype)
        self.dec2 = CondResBlock(4 * base, base, full_cond, rng, dtype=dtype)
        self.dec1 = CondResBlock(2 * base, base, full_cond, rng, dtype=dtype)
        self.head = Conv1d(base, action_dim, 1, rng, dtype=dtype)

    def forward(self, a_k: Tensor, k: np.ndarray, cond: Tensor) -> Tensor:
        """a_k (B, N, J), k (B,) ints, cond (B, D) -> predicted noise (B, N, J)."""
        b = a_k.shape[0]
        emb = Tensor(timestep_embedding(k, self.step_dim, self.dtype))
        step = self.step_fc2(tc.gelu(self.step_fc1(emb)))
        c = tc.concat([step, cond], axis=-1)
        x = a_k.transpose(0, 2, 1)
        s1 = self.enc1(x, c)
        s2 = self.enc2(self.down1(s1), c)
        m = self.mid(self.down2(s2), c)
        u2 = self.dec2(tc.concat([tc.repeat_last(m, 2), s2], axis=1), c)
        u1 = self.dec1(tc.concat([tc.repeat_last(u2, 2), s1], axis=1), c)
        out = self.head(u1)
        return out.transpose(0, 2, 1).reshape(b, self.horizon, self.action_dim)


def diffusion_loss(
    net: Callable[[Tensor, np.ndarray, Tensor], Tensor],
    sched: SchedulerState,
    cond: Tensor,
    a0: np.ndarray,
    rng: np.random.Generator,
) -> Tensor:
    """MSE between injected and predicted noise; one step k ~ U{1..K} per batch row."""
    b = a0.shape[0]
    k = rng.integers(1, sched.K + 1, size=b)
    eps = rng.standard_normal(a0.shape).astype(a0.dtype)
    noisy = add_noise(sched, a0, eps, k)
    pred = net(Tensor(noisy), k, cond)
    return tc.mse(pred, eps)


def sample(
    net: Callable[[Tensor, np.ndarray, Tensor], Tensor],
    sched: SchedulerState,
    cond: Tensor,
    shape: tuple[int, int],
    rngs: Sequence[np.random.Generator],
    dtype=np.float32,
) -> np.ndarray:
    """Full K-step reverse chain, one independent rng stream per batch row; output clamped to [-1, 1]."""
    b = cond.shape[0]
    if len(rngs) != b:
        raise ValueError(f"need one rng per batch row: {len(rngs)} streams for batch {b}")
    a = np.stack([r.standard_normal(shape) for r in rngs]).astype(dtype)
    with tc.no_grad():
        for k in range(sched.K, 0, -1):
            eps = net(Tensor(a), np.full(b, k), cond).data
            z = np.stack([r.standard_normal(shape) for r in rngs]).astype(dtype) if k > 1 else None
            a = denoise_step(sched, a, k, eps, z)
    return np.clip(a, -1.0, 1.0)
