import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_config
from vodp import dataset as ds
from vodp import trainer
from vodp.nn import Parameter
from vodp.trainer import TrainConfig

CFG = TrainConfig()


# ------------------------------------------------------------------ schedule
def test_lr_closed_forms():
    total = 3600
    w = trainer.warmup_steps(total, CFG)
    assert w == 180
    assert trainer.lr_at(0, total, CFG) == 0.0
    assert trainer.lr_at(w, total, CFG) == 1e-4
    mid = w + (total - w) // 2
    assert abs(trainer.lr_at(mid, total, CFG) - 0.5e-4) < 1e-12
    assert trainer.lr_at(total, total, CFG) == pytest.approx(0.0, abs=1e-20)


def test_lr_continuous_at_warmup_boundary():
    total = 1000
    w = trainer.warmup_steps(total, CFG)
    right = CFG.lr * 0.5 * (1 + math.cos(0.0))
    assert abs(trainer.lr_at(w, total, CFG) - right) < 1e-12
    assert abs(trainer.lr_at(w + 1, total, CFG) - trainer.lr_at(w, total, CFG)) < CFG.lr / (total - w)


def test_lr_monotone_phases():
    total = 400
    lrs = [trainer.lr_at(s, total, CFG) for s in range(total + 1)]
    w = trainer.warmup_steps(total, CFG)
    assert all(a <= b for a, b in zip(lrs[:w], lrs[1 : w + 1]))
    assert all(a >= b for a, b in zip(lrs[w:], lrs[w + 1 :]))


def test_lr_without_warmup():
    cfg = replace(CFG, warmup_ratio=0.0)
    assert trainer.lr_at(0, 100, cfg) == cfg.lr


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        trainer.lr_at(11, 10, CFG)


def test_ema_decay_closed_form_and_monotone():
    assert abs(trainer.ema_decay(1, CFG) - (1 - 2 ** (-0.75))) < 1e-12
    ds_ = [trainer.ema_decay(s, CFG) for s in range(1, 5000)]
    assert all(a <= b for a, b in zip(ds_, ds_[1:]))
    assert trainer.ema_decay(10**12, CFG) == trainer.EMA_MAX_DECAY
    with pytest.raises(ValueError):
        trainer.ema_decay(0, CFG)


def test_ema_converges_geometrically_to_constant_params():
    shadow = {"w": np.zeros(3)}
    target = {"w": np.array([1.0, -2.0, 0.5])}
    gaps = []
    for step in range(1, 60):
        d = trainer.ema_update(shadow, target, step, CFG)
        gap = np.abs(shadow["w"] - target["w"]).max()
        if gaps:
            assert gap == pytest.approx(gaps[-1] * d)
        gaps.append(gap)
    assert gaps[-1] < gaps[0]


# --------------------------------------------------------------------- adam
def scalar_adam(p, grads, lr, cfg):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        p = p - lr * cfg.weight_decay * p
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mh = m / (1 - cfg.beta1**t)
        vh = v / (1 - cfg.beta2**t)
        p = p - lr * mh / (math.sqrt(vh) + cfg.adam_eps)
    return p


def test_adam_zero_grad_no_decay_is_identity():
    cfg = replace(CFG, weight_decay=0.0)
    p = [np.array([1.0, -3.0])]
    out = trainer.adam_step(p, [np.zeros(2)], {}, 1e-3, cfg)
    np.testing.assert_array_equal(out[0], p[0])


def test_adam_decay_only_shrinks_geometrically():
    cfg = replace(CFG, weight_decay=0.1)
    p = [np.array([2.0, -1.0])]
    state = {}
    for _ in range(5):
        p = trainer.adam_step(p, [np.zeros(2)], state, 0.01, cfg)
    np.testing.assert_allclose(p[0], np.array([2.0, -1.0]) * (1 - 0.01 * 0.1) ** 5, rtol=1e-15)


def test_adam_constant_grad_matches_scalar_reference():
    cfg = CFG
    grads = [0.3] * 50
    expect = scalar_adam(1.0, grads, 1e-2, cfg)
    p, state = [np.array([1.0])], {}
    for g in grads:
        p = trainer.adam_step(p, [np.array([g])], state, 1e-2, cfg)
    assert abs(p[0][0] - expect) < 1e-14
    # bounded update: each step moves at most ~lr
    assert abs(1.0 - expect) <= 50 * 1e-2 * 1.001


def test_adam_class_matches_functional():
    cfg = CFG
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal(4), dtype=np.float64)
    ref, state = [p.data.copy()], {}
    opt = trainer.Adam([p], cfg)
    for _ in range(10):
        g = rng.standard_normal(4)
        p.grad = g.copy()
        opt.step(1e-3)
        ref = trainer.adam_step(ref, [g], state, 1e-3, cfg)
    np.testing.assert_allclose(p.data, ref[0], rtol=0, atol=1e-15)


def test_adam_moment_shape_mismatch():
    state = {"m": [np.zeros(2)], "v": [np.zeros(2)], "t": 0}
    with pytest.raises(ValueError):
        trainer.adam_step([np.zeros(3)], [np.zeros(3)], state, 1e-3, CFG)


# ------------------------------------------------------------------- config
def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.lr, c.warmup_ratio, c.beta1, c.beta2, c.weight_decay, c.adam_eps) == (1e-4, 0.05, 0.95, 0.99, 1e-6, 1e-8)
    assert (c.ema_inv_gamma, c.ema_power, c.batch, c.epochs, c.horizon, c.diffusion_steps) == (1.0, 0.75, 32, 50, 8, 100)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nbatch = 16\nlr=3e-4  # peak\nmodality = no_sem\n")
    cfg = trainer.load_config(path, {"epochs": "7"}, environ={})
    assert (cfg.batch, cfg.lr, cfg.modality, cfg.epochs) == (16, 3e-4, "no_sem", 7)


def test_unknown_key_named(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("batch = 4\nlearning_rate = 1\n")
    with pytest.raises(trainer.ConfigError, match="learning_rate"):
        trainer.load_config(path, environ={})
    with pytest.raises(trainer.ConfigError, match="'batch'"):
        trainer.load_config(None, {"batch": "many"}, environ={})


def test_invalid_values_rejected():
    with pytest.raises(trainer.ConfigError):
        TrainConfig(warmup_ratio=1.0)
    with pytest.raises(trainer.ConfigError):
        TrainConfig(batch=0)


def test_seed_env_override():
    assert trainer.load_config(None, environ={"VODP_SEED": "42"}).seed == 42
    assert trainer.load_config(None, {"seed": 3}, environ={"VODP_SEED": "42"}).seed == 3


# -------------------------------------------------------------------- train
def test_epoch_batches_cover_each_window_once(tiny_demos):
    windows = tiny_demos.windows()
    batches = trainer.epoch_batches(windows, 7, np.random.default_rng(0))
    flat = np.concatenate(batches)
    assert len(flat) == len(windows)
    assert sorted(map(tuple, flat.tolist())) == sorted(map(tuple, windows.tolist()))
    assert all(len(b) == 7 for b in batches[:-1])


def test_training_deterministic_and_initial_loss(tiny_demos, tmp_path):
    cfg = tiny_config(max_steps=10)
    a = trainer.train(cfg, tiny_demos, tmp_path / "a")
    b = trainer.train(cfg, tiny_demos, tmp_path / "b")
    ma = trainer.read_metrics(tmp_path / "a" / "metrics.jsonl")
    mb = trainer.read_metrics(tmp_path / "b" / "metrics.jsonl")
    assert [r["loss"] for r in ma] == [r["loss"] for r in mb]
    assert len(ma) == 10 and set(ma[0]) == {"step", "epoch", "lr", "loss", "wall_ms"}
    assert abs(ma[0]["loss"] - 1.0) <= 0.3
    for k in a.ema:
        assert a.ema[k].tobytes() == b.ema[k].tobytes()
        assert np.isfinite(a.ema[k]).all()


def test_checkpoint_round_trip(tiny_demos, tmp_path):
    ckpt = trainer.train(tiny_config(max_steps=3), tiny_demos, tmp_path, meta={"note": "x"})
    loaded = trainer.load_checkpoint(tmp_path / "final.vdpc")
    assert loaded.step == 3 and loaded.meta == {"note": "x"}
    assert loaded.policy_config == ckpt.policy_config
    for k in ckpt.params:
        assert loaded.params[k].tobytes() == ckpt.params[k].astype("<f4").tobytes()
        assert loaded.ema[k].tobytes() == ckpt.ema[k].astype("<f4").tobytes()
    np.testing.assert_array_equal(loaded.action_stats[0], ckpt.action_stats[0])
    frames = np.concatenate([e.images for e in tiny_demos.episodes]).reshape(-1, 3).astype(np.float64)
    np.testing.assert_allclose(loaded.image_stats[0], frames.mean(0), rtol=1e-10)
    np.testing.assert_allclose(loaded.image_stats[1], frames.std(0), rtol=1e-6)
    assert loaded.build_policy().image_norm is not None


def test_checkpoint_every_epoch_files(tiny_demos, tmp_path):
    trainer.train(tiny_config(epochs=2, checkpoint_every=1), tiny_demos, tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.vdpc"))
    assert names == ["ckpt_epoch0001.vdpc", "ckpt_epoch0002.vdpc", "final.vdpc"]


def test_loaded_checkpoint_acts_reproducibly(tiny_demos, tmp_path):
    trainer.train(tiny_config(max_steps=2), tiny_demos, tmp_path)
    ckpt = trainer.load_checkpoint(tmp_path / "final.vdpc")
    images, states, _ = tiny_demos.batch(np.array([[0, 3], [1, 0]]), 1, 8)
    out = [ckpt.build_policy().act(images, states, [np.random.default_rng([5, i]) for i in range(2)]) for _ in range(2)]
    assert out[0].tobytes() == out[1].tobytes()
    assert out[0].shape == (2, 8, 3)


def test_bad_checkpoint_rejected(tmp_path):
    (tmp_path / "x.vdpc").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="not a checkpoint"):
        trainer.load_checkpoint(tmp_path / "x.vdpc")


def test_non_finite_loss_aborts_with_diagnostic(tiny_demos):
    eps = [ds.Episode(e.images.copy(), e.states, e.actions) for e in tiny_demos.episodes]
    for e in eps:
        e.images[:] = np.nan
    bad = ds.DemoDataset(eps, tiny_demos.image_hw, tiny_demos.action_dim)
    with pytest.raises(trainer.TrainingError, match=r"step 0 .*batch windows \[\["):
        trainer.train(tiny_config(max_steps=2), bad)
