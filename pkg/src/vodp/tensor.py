"""Dense tensors with reverse-mode differentiation, backed by numpy buffers.

Every op returns a new :class:`Tensor`. When gradients are enabled and any
input requires them, the output records a :class:`Node` holding the inputs
and a closure mapping the output gradient to input gradients. ``backward``
orders the recorded nodes topologically, visits each once, accumulates into
leaf ``.grad`` buffers and then drops the nodes so the graph is freed.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-5

_grad_enabled = True
_broken_ops: set[str] = set()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def broken_backward(*ops: str):
    """Debug hook: scale the backward of the named ops by 1.5.

    Used by the gradient-check harness to prove it catches a wrong rule.
    """
    added = [op for op in ops if op not in _broken_ops]
    _broken_ops.update(added)
    try:
        yield
    finally:
        _broken_ops.difference_update(added)


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # ------------------------------------------------------------- backward
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            node = t._node
            if g is None:
                t._node = None
                continue
            if node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            parent_grads = node.backward(g)
            if node.op in _broken_ops:
                parent_grads = tuple(None if pg is None else pg * 1.5 for pg in parent_grads)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
            t._node = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen = {id(root)}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        t, i = stack.pop()
        parents = t._node.parents if t._node is not None else ()
        if i < len(parents):
            stack.append((t, i + 1))
            p = parents[i]
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, 0))
        else:
            order.append(t)
    return order


# ---------------------------------------------------------------- plumbing
def _check_finite(data: np.ndarray, op: str) -> None:
    # A finite sum implies finite entries; only a non-finite sum needs the full scan.
    with np.errstate(over="ignore", invalid="ignore"):
        total = data.sum()
    if not np.isfinite(total) and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values (shape {data.shape})")


def _result(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, parents, backward)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------- elementwise ops
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), backward, "div")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    sq = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * sq))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * d,)

    return _result(out, (x,), backward, "gelu")


def exp(x: Tensor) -> Tensor:
    # Overflow and domain errors are reported by the finiteness check instead.
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


# ------------------------------------------------------------ linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- reductions
def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


# --------------------------------------------------------------- reshaping
def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; fancy indexing is not differentiable here."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(np.array(out, copy=True), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out_grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out_grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(out_grads)

    return _result(out, tuple(tensors), backward, "concat")


def repeat_last(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling along the last axis."""
    out = np.repeat(x.data, factor, axis=-1)
    return _result(
        out,
        (x,),
        lambda g: (g.reshape(*x.shape, factor).sum(axis=-1),),
        "repeat_last",
    )


# ------------------------------------------------------------- fused kernels
def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (broadcastable boolean, True = keep) zeroes excluded entries
    exactly instead of pushing -inf through the buffer.
    """
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    xd = x.data
    if mask is None:
        shifted = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(mask, xd.shape)
        lowest = np.finfo(xd.dtype).min
        m = np.where(mask, xd, lowest).max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, xd - m, 0.0)), 0.0).astype(xd.dtype)
    total = e.sum(axis=axis, keepdims=True)
    y = e / np.where(total > 0, total, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(xd.ndim - 1))
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=lead).reshape(gain.shape)
        if bias.requires_grad:
            gb = g.sum(axis=lead).reshape(bias.shape)
        return gx, gg, gb

    return _result(out, (x, gain, bias), backward, "layer_norm")


def avg_pool_1d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Average non-overlapping groups along the last (feature) axis."""
    if kernel != stride:
        raise ValueError("avg_pool_1d supports non-overlapping windows only (kernel == stride)")
    f = x.shape[-1]
    if f % kernel:
        raise ShapeError(f"avg_pool_1d: feature width {f} not divisible by kernel {kernel}")
    out = x.data.reshape(*x.shape[:-1], f // kernel, kernel).mean(axis=-1)

    def backward(g):
        return (np.repeat(g / kernel, kernel, axis=-1),)

    return _result(out, (x,), backward, "avg_pool_1d")


def _as_pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (B, Cin, H, W) with ``w`` (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    bsz, cin, h, wid = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {wcin}")
    sh, sw = _as_pair(stride)
    ph, pw = _as_pair(padding)
    ho = conv_out_size(h, kh, sh, ph)
    wo = conv_out_size(wid, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wid} with padding "
            f"({ph},{pw}); output extent would be {ho}x{wo}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += gcols[
                        ..., i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + wid]
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward, "conv2d")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over the last axis of ``x`` (B, Cin, L); ``w`` is (Cout, Cin, k)."""
    bsz, cin, length = x.shape
    cout, _, k = w.shape
    out = conv2d(
        reshape(x, (bsz, cin, 1, length)),
        reshape(w, (cout, cin, 1, k)),
        b,
        stride=(1, stride),
        padding=(0, padding),
    )
    return reshape(out, (bsz, cout, out.shape[-1]))


def adaptive_avg_pool_2d(x: Tensor, out_size=(1, 1)) -> Tensor:
    """Average pooling to ``out_size``; input extents must divide evenly."""
    oh, ow = _as_pair(out_size)
    bsz, c, h, w = x.shape
    if h % oh or w % ow:
        raise ShapeError(f"adaptive_avg_pool_2d: {h}x{w} not divisible into {oh}x{ow}")
    fh, fw = h // oh, w // ow
    out = x.data.reshape(bsz, c, oh, fh, ow, fw).mean(axis=(3, 5))

    def backward(g):
        g = g[:, :, :, None, :, None] / (fh * fw)
        return (np.broadcast_to(g, (bsz, c, oh, fh, ow, fw)).reshape(x.shape).copy(),)

    return _result(out, (x,), backward, "adaptive_avg_pool_2d")


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# ------------------------------------------------------------- constructors
def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def grad_norm(tensors: Iterable[Tensor]) -> float:
    """Global L2 norm of the gradients attached to ``tensors``."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.dot(t.grad.ravel().astype(np.float64), t.grad.ravel().astype(np.float64)))
    return math.sqrt(total)
