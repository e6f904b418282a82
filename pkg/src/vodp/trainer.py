"""Optimisation loop, checkpoints and metrics for the visuomotor policy."""

from __future__ import annotations

import json
import math
import os
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tc
from .dataset import DemoDataset
from .policy import ImageNormalizer, MinMaxNormalizer, PolicyConfig, VODPPolicy

EMA_MAX_DECAY = 0.9999


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # Optimisation (defaults from the reference hyperparameter table, scaled batch/epochs).
    batch: int = 32
    epochs: int = 50
    lr: float = 1e-4
    warmup_ratio: float = 0.05
    beta1: float = 0.95
    beta2: float = 0.99
    weight_decay: float = 1e-6
    adam_eps: float = 1e-8
    ema_inv_gamma: float = 1.0
    ema_power: float = 0.75
    grad_clip: float = 1.0
    seed: int = 0
    max_steps: int = 0  # 0 = run every epoch in full
    checkpoint_every: int = 10  # epochs
    # Model.
    history: int = 1
    horizon: int = 8
    diffusion_steps: int = 100
    modality: str = "full"
    downsample: str = "pool"
    patch: int = 8
    width: int = 64
    heads: int = 4
    semantic_blocks: int = 2
    aa_blocks: int = 2
    scene_width: int = 64
    noise_base: int = 64

    def __post_init__(self):
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.history < 1:
            raise ConfigError(f"history must be >= 1, got {self.history}")

    def policy_config(self, image_size: int, action_dim: int) -> PolicyConfig:
        return PolicyConfig(
            image_size=image_size,
            patch=self.patch,
            width=self.width,
            heads=self.heads,
            semantic_blocks=self.semantic_blocks,
            aa_blocks=self.aa_blocks,
            scene_width=self.scene_width,
            action_dim=action_dim,
            history=self.history,
            horizon=self.horizon,
            diffusion_steps=self.diffusion_steps,
            noise_base=self.noise_base,
            modality=self.modality,
            downsample=self.downsample,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw: str, typ):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {typ.__name__}") from exc


_FIELD_TYPES = {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(TrainConfig)}


def apply_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    """Overlay ``values`` (strings or typed) onto ``cfg``; unknown keys raise ConfigError."""
    updates = {}
    for key, value in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, value, _FIELD_TYPES[key]) if isinstance(value, str) else value
    try:
        return replace(cfg, **updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides: dict | None = None, environ=os.environ) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        cfg = apply_overrides(cfg, parse_config_text(text))
    # Precedence: defaults < config file < VODP_SEED < explicit overrides.
    if environ.get("VODP_SEED"):
        cfg = apply_overrides(cfg, {"seed": environ["VODP_SEED"]})
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


# ------------------------------------------------------------------ schedule
def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    if cfg.warmup_ratio <= 0:
        return 0
    return max(1, int(round(cfg.warmup_ratio * total_steps)))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to the peak, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg)
    if step <= w and w > 0:
        return cfg.lr * (step / w)
    span = total_steps - w
    progress = (step - w) / span if span > 0 else 1.0
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_decay(step: int, cfg: TrainConfig) -> float:
    if step < 1:
        raise ValueError(f"EMA step must be >= 1, got {step}")
    return min(EMA_MAX_DECAY, 1.0 - (1.0 + step / cfg.ema_inv_gamma) ** (-cfg.ema_power))


def ema_update(shadow: dict, params: dict, step: int, cfg: TrainConfig) -> float:
    """In-place shadow <- d * shadow + (1 - d) * params; returns d."""
    d = ema_decay(step, cfg)
    for name, value in params.items():
        s = shadow[name]
        s *= d
        s += (1.0 - d) * value
    return d


class Adam:
    """Adam with decoupled weight decay applied before the moment update."""

    def __init__(self, params: list, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            g = p.grad
            if g is None:
                continue
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


def adam_step(params: list, grads: list, state: dict, lr: float, cfg: TrainConfig) -> list:
    """Functional single update on numpy arrays; ``state`` holds m, v and t and is updated in place."""
    if "m" not in state:
        state.update(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], t=0)
    state["t"] += 1
    t = state["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if state["m"][i].shape != p.shape:
            raise ValueError(f"moment shape {state['m'][i].shape} != parameter shape {p.shape}")
        p = p * (1.0 - lr * cfg.weight_decay)
        m = state["m"][i] = cfg.beta1 * state["m"][i] + (1.0 - cfg.beta1) * g
        v = state["v"][i] = cfg.beta2 * state["v"][i] + (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1**t)
        vhat = v / (1.0 - cfg.beta2**t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps))
    return out


# ---------------------------------------------------------------- checkpoint
CKPT_MAGIC = b"VDPC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    policy_config: PolicyConfig
    train_config: dict
    params: "OrderedDict[str, np.ndarray]"
    ema: "OrderedDict[str, np.ndarray]"
    action_stats: tuple[np.ndarray, np.ndarray]
    state_stats: tuple[np.ndarray, np.ndarray]
    step: int
    meta: dict
    image_stats: tuple[np.ndarray, np.ndarray] | None = None

    def build_policy(self, use_ema: bool = True) -> VODPPolicy:
        policy = VODPPolicy(self.policy_config, np.random.default_rng(0))
        policy.load_state_dict(self.ema if use_ema else self.params)
        policy.action_norm = MinMaxNormalizer(*self.action_stats)
        policy.state_norm = MinMaxNormalizer(*self.state_stats)
        if self.image_stats is not None:
            policy.image_norm = ImageNormalizer(*self.image_stats)
        return policy


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Versioned header (JSON) followed by named little-endian f32 sections."""
    header = {
        "policy_config": ckpt.policy_config.to_dict(),
        "train_config": ckpt.train_config,
        "action_stats": [ckpt.action_stats[0].tolist(), ckpt.action_stats[1].tolist()],
        "state_stats": [ckpt.state_stats[0].tolist(), ckpt.state_stats[1].tolist()],
        "step": ckpt.step,
        "meta": ckpt.meta,
    }
    if ckpt.image_stats is not None:
        header["image_stats"] = [ckpt.image_stats[0].tolist(), ckpt.image_stats[1].tolist()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    sections = [(f"param/{k}", v) for k, v in ckpt.params.items()] + [(f"ema/{k}", v) for k, v in ckpt.ema.items()]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(sections)))
        for name, arr in sections:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    magic, version, hlen = struct.unpack_from("<4sII", buf, 0)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(buf[off : off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params, ema = OrderedDict(), OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
        kind, _, key = name.partition("/")
        (params if kind == "param" else ema)[key] = arr
    stats = lambda pair: (np.asarray(pair[0], dtype=np.float64), np.asarray(pair[1], dtype=np.float64))  # noqa: E731
    return Checkpoint(
        policy_config=PolicyConfig.from_dict(header["policy_config"]),
        train_config=header["train_config"],
        params=params,
        ema=ema,
        action_stats=stats(header["action_stats"]),
        state_stats=stats(header["state_stats"]),
        step=header["step"],
        meta=header.get("meta", {}),
        image_stats=stats(header["image_stats"]) if "image_stats" in header else None,
    )


# --------------------------------------------------------------------- train
def total_steps_for(cfg: TrainConfig, num_windows: int) -> int:
    per_epoch = math.ceil(num_windows / cfg.batch)
    total = per_epoch * cfg.epochs
    return min(total, cfg.max_steps) if cfg.max_steps > 0 else total


def epoch_batches(windows: np.ndarray, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled pass over every (episode, offset) window, split into batches."""
    order = windows[rng.permutation(len(windows))]
    return [order[i : i + batch] for i in range(0, len(order), batch)]


def train(
    cfg: TrainConfig,
    dataset: DemoDataset,
    out_dir=None,
    log: Callable[[str], None] | None = None,
    meta: dict | None = None,
) -> Checkpoint:
    """Train from scratch; writes metrics.jsonl and checkpoints into ``out_dir`` when given."""
    log = log or (lambda msg: None)
    rng = np.random.default_rng(cfg.seed)
    h, w = dataset.image_hw
    if h != w:
        raise ConfigError(f"square images required, dataset has {h}x{w}")
    policy = VODPPolicy(cfg.policy_config(h, dataset.action_dim), rng)
    action_norm = MinMaxNormalizer.fit(dataset.all_actions())
    state_norm = MinMaxNormalizer.fit(dataset.all_states())
    policy.image_norm = ImageNormalizer.fit(ep.images for ep in dataset.episodes)
    params = policy.named_parameters()
    names, tensors = zip(*params)
    shadow = OrderedDict((n, t.data.copy()) for n, t in zip(names, tensors))
    opt = Adam(list(tensors), cfg)
    windows = dataset.windows()
    total = total_steps_for(cfg, len(windows))
    log(f"parameters: {policy.num_parameters()}  windows: {len(windows)}  steps: {total}")

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
    meta = dict(meta or {})

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            policy_config=policy.cfg,
            train_config=cfg.to_dict(),
            params=policy.state_dict(),
            ema=OrderedDict((k, v.copy()) for k, v in shadow.items()),
            action_stats=action_norm.to_arrays(),
            state_stats=state_norm.to_arrays(),
            step=step,
            meta=meta,
            image_stats=policy.image_norm.to_arrays(),
        )

    step = 0
    try:
        for epoch in range(cfg.epochs):
            for pairs in epoch_batches(windows, cfg.batch, rng):
                if step >= total:
                    break
                t0 = time.perf_counter()
                images, states, actions = dataset.batch(pairs, cfg.history, cfg.horizon)
                states = state_norm.normalize(states.astype(np.float64)).astype(np.float32)
                actions = action_norm.normalize(actions.astype(np.float64)).astype(np.float32)
                lr = lr_at(step, total, cfg)
                policy.zero_grad()
                try:
                    loss = policy.loss(images, states, actions, rng)
                    loss.backward()
                except tc.NonFiniteError as exc:
                    raise TrainingError(
                        f"non-finite value at step {step} (epoch {epoch}); batch windows {pairs.tolist()}: {exc}"
                    ) from exc
                norm = tc.grad_norm(tensors)
                if cfg.grad_clip > 0 and norm > cfg.grad_clip:
                    scale = cfg.grad_clip / (norm + 1e-6)
                    for t in tensors:
                        if t.grad is not None:
                            t.grad *= scale
                opt.step(lr)
                step += 1
                ema_update(shadow, {n: t.data for n, t in zip(names, tensors)}, step, cfg)
                row = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": loss.item(),
                    "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
                }
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(row) + "\n")
                if step % 50 == 0 or step == 1:
                    log(f"step {step}/{total} epoch {epoch} lr {lr:.3e} loss {row['loss']:.4f}")
            if out is not None and cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(snapshot(step), out / f"ckpt_epoch{epoch + 1:04d}.vdpc")
            if step >= total:
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    ckpt = snapshot(step)
    if out is not None:
        save_checkpoint(ckpt, out / "final.vdpc")
    return ckpt


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
