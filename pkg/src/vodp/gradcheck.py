"""Central-difference gradient oracle and the registry of per-op checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .nn import Module, MultiHeadAttention
from .tensor import Tensor

OP_TOL = 1e-6
END_TO_END_TOL = 1e-4


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` must be deterministic. With ``coords`` set, only that many randomly
    chosen coordinates are perturbed.
    """
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, size=coords, replace=False)
    worst = 0.0
    with tc.no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = f(x).item()
            flat[i] = orig - h
            down = f(x).item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def module_gradient_error(
    loss_fn: Callable[[], Tensor],
    module: Module,
    h: float = 1e-4,
    coords_per_param: int = 4,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of every parameter of ``module`` against one backward pass."""
    rng = rng or np.random.default_rng(0)
    module.zero_grad()
    loss_fn().backward()
    errors = {}
    with tc.no_grad():
        for name, p in module.named_parameters():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            n = min(coords_per_param, flat.size)
            worst = 0.0
            for i in rng.choice(flat.size, size=n, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                worst = max(worst, abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric)))
            errors[name] = worst
    return errors


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # Random projection so every output coordinate carries a distinct weight.
    w = rng.standard_normal(out.shape)
    return (out * w).sum()


def _single_input_checks():
    f64 = np.float64

    def make(op, shape, scale=1.0, positive=False):
        def run(seed):
            rng = np.random.default_rng(seed)
            data = rng.standard_normal(shape) * scale
            if positive:
                data = np.abs(data) + 0.5
            x = Tensor(data.astype(f64), requires_grad=True)
            wrng_seed = seed + 1000
            return finite_diff_check(lambda t: _weighted(op(t), np.random.default_rng(wrng_seed)), x)

        return run

    mask = np.array([[True, False, True, True, False]])
    return {
        "softmax": make(lambda t: tc.softmax(t, axis=-1), (3, 5), scale=3.0),
        "softmax_masked": make(lambda t: tc.softmax(t, axis=-1, mask=mask), (3, 5), scale=3.0),
        "gelu": make(tc.gelu, (4, 6), scale=2.0),
        "exp": make(tc.exp, (3, 4)),
        "log": make(tc.log, (3, 4), positive=True),
        "sum": make(lambda t: tc.sum_(t, axis=1, keepdims=True), (3, 4, 2)),
        "mean": make(lambda t: tc.mean(t, axis=(0, 2)), (3, 4, 2)),
        "reshape": make(lambda t: t.reshape(6, 4), (2, 3, 4)),
        "transpose": make(lambda t: t.transpose(2, 0, 1), (2, 3, 4)),
        "getitem": make(lambda t: t[:, 1:3], (3, 5)),
        "avg_pool_1d": make(lambda t: tc.avg_pool_1d(t, 2, 2), (3, 8)),
        "repeat_last": make(lambda t: tc.repeat_last(t, 2), (2, 3, 4)),
        "adaptive_avg_pool_2d": make(lambda t: tc.adaptive_avg_pool_2d(t, (1, 1)), (2, 3, 4, 4)),
    }


def _multi_input(op, shapes, seed, positive=()):
    rng = np.random.default_rng(seed)
    inputs = []
    for i, s in enumerate(shapes):
        d = rng.standard_normal(s)
        if i in positive:
            d = np.abs(d) + 0.5
        inputs.append(Tensor(d, requires_grad=True))
    # Each input is perturbed in place, so the closure can ignore its argument.
    def f(_):
        return _weighted(op(*inputs), np.random.default_rng(seed + 1000))

    return max(finite_diff_check(f, x) for x in inputs)


def _multi_input_checks():
    return {
        "add": lambda s: _multi_input(lambda a, b: a + b, [(3, 4), (4,)], s),
        "sub": lambda s: _multi_input(lambda a, b: a - b, [(3, 1), (3, 4)], s),
        "mul": lambda s: _multi_input(lambda a, b: a * b, [(2, 3, 4), (3, 1)], s),
        "div": lambda s: _multi_input(lambda a, b: a / b, [(3, 4), (3, 4)], s, positive=(1,)),
        "matmul": lambda s: _multi_input(tc.matmul, [(2, 3, 4), (4, 5)], s),
        "matmul_batched": lambda s: _multi_input(tc.matmul, [(2, 3, 4), (2, 4, 2)], s),
        "concat": lambda s: _multi_input(lambda a, b: tc.concat([a, b], axis=1), [(2, 3), (2, 2)], s),
        "layer_norm": lambda s: _multi_input(tc.layer_norm, [(3, 6), (6,), (6,)], s),
        "conv2d": lambda s: _multi_input(
            lambda x, w, b: tc.conv2d(x, w, b, stride=2, padding=1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)], s
        ),
        "conv1d": lambda s: _multi_input(
            lambda x, w, b: tc.conv1d(x, w, b, stride=1, padding=1), [(2, 3, 6), (4, 3, 3), (4,)], s
        ),
    }


def _attention_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    attn = MultiHeadAttention(8, 2, rng, dtype=np.float64)
    q = rng.standard_normal((2, 3, 8))
    kv = rng.standard_normal((2, 4, 8))
    mask = np.array([[True, True, False, True], [True, True, True, True]])

    def loss():
        out = attn(Tensor(q), Tensor(kv), key_mask=mask)
        return _weighted(out, np.random.default_rng(seed + 1000))

    errs = module_gradient_error(loss, attn, coords_per_param=8, rng=rng)
    x = Tensor(q.copy(), requires_grad=True)
    errs["query"] = finite_diff_check(
        lambda t: _weighted(attn(t, Tensor(kv), key_mask=mask), np.random.default_rng(seed + 1000)), x
    )
    return max(errs.values())


def _fuse_frame_check(seed: int) -> float:
    from .fuser import Fuser

    rng = np.random.default_rng(seed)
    fuser = Fuser(8, 2, rng, dtype=np.float64)
    g = rng.standard_normal((2, 4, 16))
    s = rng.standard_normal((2, 4, 8))

    def loss():
        return _weighted(fuser.fuse_frame(Tensor(g), Tensor(s)), np.random.default_rng(seed + 1000))

    return max(module_gradient_error(loss, fuser, coords_per_param=8, rng=rng).values())


def op_checks() -> dict[str, Callable[[int], float]]:
    checks = {}
    checks.update(_single_input_checks())
    checks.update(_multi_input_checks())
    checks["attention"] = _attention_check
    checks["fuse_frame"] = _fuse_frame_check
    return checks


def tiny_policy_config(**overrides):
    """Dims used for the end-to-end check: T=1, P=16, C=16, N=4, J=3."""
    from .policy import PolicyConfig

    base = dict(
        image_size=32,
        patch=8,
        width=16,
        heads=4,
        semantic_blocks=1,
        aa_blocks=1,
        scene_width=16,
        action_dim=3,
        history=1,
        horizon=4,
        diffusion_steps=10,
        noise_base=8,
    )
    base.update(overrides)
    return PolicyConfig(**base)


def end_to_end_check(seed: int = 0, coords_per_param: int = 3, **overrides) -> tuple[float, dict[str, float]]:
    """Finite differences of the full policy loss against every parameter tensor (float64)."""
    from .policy import VODPPolicy

    cfg = tiny_policy_config(**overrides)
    rng = np.random.default_rng(seed)
    policy = VODPPolicy(cfg, rng, dtype=np.float64)
    b = 2
    images = rng.random((b, cfg.history, cfg.image_size, cfg.image_size, 3))
    states = rng.uniform(-1, 1, (b, cfg.history, cfg.action_dim))
    actions = rng.uniform(-1, 1, (b, cfg.horizon, cfg.action_dim))

    def loss():
        return policy.loss(images, states, actions, np.random.default_rng(seed + 7))

    errors = module_gradient_error(loss, policy, coords_per_param=coords_per_param, rng=rng)
    return max(errors.values()), errors


def run_all(seeds=range(5), end_to_end: bool = True) -> list[CheckResult]:
    results = []
    for name, check in op_checks().items():
        results.append(CheckResult(name, max(check(s) for s in seeds), OP_TOL))
    if end_to_end:
        results.append(CheckResult("end_to_end_policy_loss", end_to_end_check()[0], END_TO_END_TOL))
    return results
