"""Parameter containers and the layers shared by every stage of the policy."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as tc
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module tree; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise tc.ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = _uniform(rng, (fan_in, fan_out), bound, dtype)
        self.bias = _uniform(rng, (fan_out,), bound, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    """dim -> 4*dim -> dim with GELU."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4, dtype=np.float32):
        self.fc1 = Linear(dim, ratio * dim, rng, dtype=dtype)
        self.fc2 = Linear(ratio * dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(tc.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head split and output projection.

    ``scale`` defaults to 1/sqrt(head width). The most recent attention map
    (batch, heads, queries, keys) is kept in ``last_weights`` for inspection.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, scale: float | None = None, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.scale = scale if scale is not None else 1.0 / math.sqrt(dim // heads)
        self.w_q = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.w_k = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.w_v = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.w_o = Linear(dim, dim, rng, dtype=dtype)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def forward(self, query: Tensor, context: Tensor | None = None, key_mask: np.ndarray | None = None) -> Tensor:
        """``query`` (B, Lq, C) attends over ``context`` (B, Lk, C).

        ``key_mask`` is a boolean (B, Lk) array; False keys receive zero weight.
        """
        context = query if context is None else context
        b, lq, _ = query.shape
        q = self._split(self.w_q(query))
        k = self._split(self.w_k(context))
        v = self._split(self.w_v(context))
        scores = (q @ k.transpose(0, 1, 3, 2)) * self.scale
        mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
        weights = tc.softmax(scores, axis=-1, mask=mask)
        self.last_weights = weights.data
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, lq, self.dim)
        return self.w_o(out)


class TransformerBlock(Module):
    """Pre-norm self-attention block: x + Attn(LN x), then x + FFN(LN x)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, rng, dtype=dtype)

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, key_mask=key_mask)
        return x + self.ffn(self.norm2(x))


class Conv2d(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dtype=np.float32,
    ):
        bound = 1.0 / math.sqrt(cin * kernel * kernel)
        self.weight = _uniform(rng, (cout, cin, kernel, kernel), bound, dtype)
        self.bias = _uniform(rng, (cout,), bound, dtype)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv1d(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        dtype=np.float32,
    ):
        bound = 1.0 / math.sqrt(cin * kernel)
        self.weight = _uniform(rng, (cout, cin, kernel), bound, dtype)
        self.bias = _uniform(rng, (cout,), bound, dtype)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return tc.conv1d(x, self.weight, self.bias, self.stride, self.padding)
