import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajmap import numerics as nx
from trajmap.decoder import DecoderWeights, ModelConfig, is_layerscale
from trajmap.errors import ConfigError, NumericError
from trajmap.metrics import EvalProtocol
from trajmap.numerics import Tensor
from trajmap.synthscene import SceneSpec, generate_clips
from trajmap.training import (
    STYLE_A,
    STYLE_B,
    AdamWState,
    TrainConfig,
    ablation_run,
    epoch_draws,
    epoch_style_plan,
    lr_at,
    optimizer_step,
    pointmap_loss,
    train,
)

TINY = ModelConfig(height=16, width=16, patch=4, dim=16, heads=2, depth=1, head_hidden=16)


@pytest.fixture(scope="module")
def pools():
    spec = SceneSpec(seed=3, frames=4, height=16, width=16, focal=14.0)
    return {
        STYLE_A: generate_clips(spec, 3, "train"),
        STYLE_B: generate_clips(SceneSpec(seed=3, frames=4, height=16, width=16, focal=14.0, style="textured"),
                                3, "train"),
    }


def _cfg(**kw):
    base = dict(epochs=2, clips_per_epoch=4, batch_size=2, learning_rate=1e-3, window=2, frame_strides=(1,),
                schedule="synthetic_only")
    base.update(kw)
    return TrainConfig(**base)


def test_loss_hand_cases():
    gt = np.array([[[[0.0, 0.0, 1.0], [0.0, 0.0, 3.0]]]])
    pred = Tensor(np.array([[[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]]]))
    # gt / 2 = {0.5, 1.5}; pred / 1 = {1, 1}; distances 0.5 and 0.5
    assert float(pointmap_loss(pred, gt).data) == pytest.approx(0.5, abs=1e-12)
    assert float(pointmap_loss(Tensor(gt.copy()), gt).data) == pytest.approx(0.0, abs=1e-12)
    assert float(pointmap_loss(Tensor(2 * gt), gt).data) == pytest.approx(0.0, abs=1e-12)


def test_loss_degenerate_gt_rejected():
    with pytest.raises(NumericError):
        pointmap_loss(Tensor(np.ones((1, 2, 1, 3))), np.zeros((1, 2, 1, 3)))
    with pytest.raises(ConfigError):
        pointmap_loss(Tensor(np.ones((1, 2, 1, 3))), np.ones((1, 1, 2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**31))
def test_loss_invariant_to_joint_rescale(c, seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(2, 3, 2, 3)) + 2.0
    pred = rng.normal(size=(2, 3, 2, 3))
    with nx.precision(np.float64):
        a = float(pointmap_loss(Tensor(pred), gt).data)
        b = float(pointmap_loss(Tensor(c * pred), c * gt).data)
    assert abs(a - b) <= 1e-12


def _adamw_oracle(p, g, m, v, step, lr, b1, b2, eps, wd):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    return p - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p), m, v


def test_optimizer_zero_grad_no_decay_is_identity():
    p = Tensor(np.array([1.5, -2.0]))
    optimizer_step([("w", p)], {"w": np.zeros(2)}, AdamWState(), 1e-2, TrainConfig(weight_decay=0.0))
    assert np.array_equal(p.data, [1.5, -2.0])


def test_optimizer_first_step_closed_form():
    p = Tensor(np.array([0.0]))
    optimizer_step([("w", p)], {"w": np.array([-3.0])}, AdamWState(), 0.01, TrainConfig(weight_decay=0.0))
    assert p.data[0] == pytest.approx(0.01 * 3.0 / (3.0 + 1e-8), rel=1e-12)


def test_optimizer_matches_transcription(rng):
    cfg = TrainConfig(weight_decay=0.1)
    p = Tensor(rng.normal(size=(3, 2)))
    ref = p.data.copy()
    m = v = np.zeros_like(ref)
    state = AdamWState()
    for step in range(1, 6):
        g = rng.normal(size=(3, 2))
        lr = lr_at(step - 1, 5, 0.02)
        optimizer_step([("w", p)], {"w": g}, state, lr, cfg)
        ref, m, v = _adamw_oracle(ref, g, m, v, step, lr, 0.9, 0.95, 1e-8, 0.1)
        assert np.array_equal(p.data, ref)


def test_layerscale_excluded_from_decay(small_config):
    w = DecoderWeights.init(small_config, seed=0, dtype=np.float64)
    params = w.trainable_parameters()
    state = optimizer_step(params, {}, AdamWState(), 1e-3, TrainConfig(weight_decay=0.5))
    ls = [n for n, _ in params if is_layerscale(n)]
    assert ls and all(state.last_decay[n] == 0.0 for n in ls)
    assert all(state.last_decay[n] == 0.5 for n, _ in params if not is_layerscale(n))
    # zero gradient: only decay moves weights, and layerscales stay put
    before = {n: p.data.copy() for n, p in params}
    optimizer_step(params, {}, state, 1e-3, TrainConfig(weight_decay=0.5))
    for n, p in params:
        if is_layerscale(n):
            assert np.array_equal(p.data, before[n])


def test_optimizer_rejects_non_finite_before_any_update():
    a, b = Tensor(np.array([1.0])), Tensor(np.array([2.0]))
    state = AdamWState()
    with pytest.raises(NumericError, match="b"):
        optimizer_step([("a", a), ("b", b)], {"a": np.array([1.0]), "b": np.array([np.nan])}, state, 0.1,
                       TrainConfig())
    assert a.data[0] == 1.0 and state.step == 0


def test_lr_schedule_shape():
    lrs = [lr_at(s, 100, 1.0) for s in range(100)]
    assert lrs[0] == pytest.approx(0.2) and lrs[4] == pytest.approx(1.0)
    assert all(x >= y for x, y in zip(lrs[4:], lrs[5:]))
    assert lrs[-1] < 1e-3


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, switch_epoch=5)
    with pytest.raises(ConfigError):
        TrainConfig(schedule="curriculum")
    TrainConfig(epochs=5, switch_epoch=5, schedule="joint")


def test_schedule_plans():
    cfg = TrainConfig(epochs=8, clips_per_epoch=6, switch_epoch=5)
    assert all(set(epoch_style_plan(cfg, e)) == {STYLE_B} for e in range(1, 6))
    assert all(set(epoch_style_plan(cfg, e)) == {STYLE_A} for e in range(6, 9))
    rev = TrainConfig(epochs=8, clips_per_epoch=6, switch_epoch=5, schedule="synthetic_then_real")
    assert [epoch_style_plan(rev, e)[0] for e in range(1, 9)] == [STYLE_A] * 3 + [STYLE_B] * 5
    joint = epoch_style_plan(TrainConfig(clips_per_epoch=6, schedule="joint"), 1)
    assert joint.count(STYLE_A) == joint.count(STYLE_B) == 3
    assert set(epoch_style_plan(TrainConfig(schedule="synthetic_only"), 3)) == {STYLE_A}


def test_draws_reshuffle_and_fit(pools):
    cfg = _cfg(clips_per_epoch=7, window=3, frame_strides=(1, 2))
    draws = epoch_draws(cfg, 1, pools)
    assert len(draws) == 7
    # every clip is used before any repeats
    assert sorted(d.clip for d in draws[:3]) == [0, 1, 2]
    for d in draws:
        assert d.start + 2 * d.stride < 4
    assert epoch_draws(cfg, 1, pools) == draws
    assert epoch_draws(cfg, 2, pools) != draws
    with pytest.raises(ConfigError):
        epoch_draws(_cfg(schedule="joint"), 1, {STYLE_A: pools[STYLE_A]})


def test_zero_epochs_returns_init(pools, tmp_path):
    w = DecoderWeights.init(TINY, seed=0)
    ref = w.copy()
    res = train(_cfg(epochs=0), pools, w, out_dir=tmp_path)
    assert res.log == [] and res.draws == []
    for (_, a), (_, b) in zip(res.weights.named_parameters(), ref.named_parameters()):
        assert np.array_equal(a.data, b.data)
    assert (tmp_path / "last" / "manifest.txt").exists()


def test_training_deterministic_and_logs(pools, tmp_path):
    cfg = _cfg(schedule="real_then_synthetic", epochs=3, switch_epoch=1)
    val = generate_clips(SceneSpec(seed=9, frames=12, height=16, width=16, focal=14.0), 1, "val")
    runs = []
    for k in range(2):
        w = DecoderWeights.init(TINY, seed=1)
        runs.append(train(cfg, pools, w, val_clips=val, out_dir=tmp_path / str(k)))
    assert runs[0].step_losses == runs[1].step_losses
    for name in ("last/manifest.txt", "best/manifest.txt", "metrics.log", "data_order.txt"):
        assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes()
    from trajmap.synthscene import directory_digest
    assert directory_digest(tmp_path / "0" / "last") == directory_digest(tmp_path / "1" / "last")
    lines = (tmp_path / "0" / "metrics.log").read_text().splitlines()
    assert lines[0] == "epoch, phase, train_loss, val_M@2, val_M@4" and len(lines) == 4
    assert lines[1].startswith("1, real,") and lines[2].startswith("2, synthetic,")
    order = [l.split(", ") for l in (tmp_path / "0" / "data_order.txt").read_text().splitlines()]
    assert all(s == STYLE_B for e, s, *_ in order if e == "1")
    assert all(s == STYLE_A for e, s, *_ in order if e != "1")
    assert all(math.isfinite(e.val["M@2"]) for e in runs[0].log)


def test_training_reduces_loss(pools):
    w = DecoderWeights.init(TINY, seed=0)
    res = train(_cfg(epochs=6, learning_rate=3e-3), pools, w)
    assert res.log[-1].train_loss < res.log[0].train_loss


def test_frozen_model_modes_agree_and_layerscale_grows(pools):
    cfg = _cfg(epochs=2, learning_rate=5e-3)
    test = pools[STYLE_A][:1]
    protocol = EvalProtocol(slice_length=4, settings=((2, 3), (3, 1)), slice_step=4)
    out = ablation_run(cfg, TINY, {STYLE_A: pools[STYLE_A]}, test, protocol)
    assert out.baseline_mode_gap == 0.0
    base, full = out.rows
    assert base.layerscale_max == 0.0
    assert full.layerscale_max > 10 * 1e-5
    table = out.table().splitlines()
    assert table[1].startswith("pairwise_baseline") and table[2].startswith("trajectory_encoder")
