import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dnrf.trainer as trainer_mod
from dnrf.dataset import load_checkpoint, save_checkpoint
from dnrf.encoding import encode_direction
from dnrf.errors import LengthMismatch, NonFiniteLoss
from dnrf.network import RadianceField
from dnrf.renderer import RaySampleBatch, composite, composite_backward
from dnrf.trainer import (
    RayTargets,
    TrainConfig,
    evaluate,
    geom_loss,
    huber_loss,
    mse,
    psnr,
    ssim,
    total_loss,
    train,
    training_frames,
    transfer_expression,
)

WHITE = np.ones(3)


def targets(color, depth=None, mask=None, weight=None):
    color = np.atleast_2d(np.asarray(color, dtype=np.float64))
    n = len(color)
    return RayTargets(color, np.zeros(n) if depth is None else np.asarray(depth, float),
                      np.zeros(n, bool) if mask is None else np.asarray(mask, bool),
                      np.ones(n) if weight is None else np.asarray(weight, float))


def tiny_cfg(small_grid, **kw):
    base = dict(total_steps=4, rays_per_step=64, occupancy_period=2, occupancy_probes=256,
                occupancy_occupied_probes=256, grid_config=small_grid, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def assert_checkpoints_equal(a, b):
    for key in ("params", "shadow", "adam_m", "adam_v", "occupancy_ema"):
        assert np.array_equal(getattr(a, key), getattr(b, key)), key
    assert (a.adam_step, a.train_step) == (b.adam_step, b.train_step)


# ---------------------------------------------------------------- loss terms


def test_huber_examples():
    assert huber_loss([0.3, 0.3, 0.3], [0.3, 0.3, 0.3]) == 0.0
    assert huber_loss([0.05], [0.0]) == pytest.approx(0.00125, abs=1e-15)
    assert huber_loss([0.2], [0.0]) == pytest.approx(0.015, abs=1e-15)
    assert huber_loss([-0.2], [0.0]) == pytest.approx(0.015, abs=1e-15)
    with pytest.raises(ValueError):
        huber_loss([0.1], [0.0], rho=0.0)


def test_huber_is_continuous_at_rho():
    below = huber_loss([0.1 - 1e-9], [0.0])
    above = huber_loss([0.1 + 1e-9], [0.0])
    assert abs(above - below) < 1e-9
    # slope on both sides approaches rho
    h = 1e-7
    for e in (0.1 - 1e-6, 0.1 + 1e-6):
        slope = (huber_loss([e + h], [0]) - huber_loss([e - h], [0])) / (2 * h)
        assert slope == pytest.approx(0.1, abs=2e-6)


def test_geom_examples():
    assert geom_loss(1.2, 1.5, False) == 0.0
    assert geom_loss(1.5, 1.5, True) == 0.0
    assert geom_loss(1.2, 1.5, True) == pytest.approx(0.3)


def test_total_loss_examples():
    assert total_loss([[0.2, 0.4, 0.6]], [1.0], targets([0.2, 0.4, 0.6], [1.0], [True])).value == 0
    mouth = total_loss([[0.55, 0.5, 0.5]], [7.0], targets([0.5, 0.5, 0.5], [1.0], [False], [40.0]))
    assert mouth.value == pytest.approx(0.05, abs=1e-12)


def test_total_loss_rejects_non_finite():
    with pytest.raises(NonFiniteLoss):
        total_loss([[np.nan, 0, 0]], [1.0], targets([0, 0, 0]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    t = targets(rng.random((n, 3)), rng.random(n) * 2, rng.random(n) < 0.5,
                np.where(rng.random(n) < 0.3, 40.0, 1.0))
    assert total_loss(rng.random((n, 3)), rng.random(n) * 2, t).value >= 0


def test_region_gating():
    rng = np.random.default_rng(0)
    c, d = rng.random((30, 3)), rng.random(30)
    tc, td = rng.random((30, 3)), rng.random(30)
    off = total_loss(c, d, targets(tc, td, np.zeros(30, bool)))
    assert not np.any(off.g_depth)
    assert off.value == pytest.approx(sum(huber_loss(a, b) for a, b in zip(c, tc)), rel=1e-12)
    on = total_loss(c, d, targets(tc, td, np.ones(30, bool)))
    assert on.value - off.value == pytest.approx(1.25 * np.abs(d - td).sum(), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_composite_and_loss_gradients(backend, seed):
    # random 8-sample ray; every sample's sigma and rgb against central differences
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(0.1, 3.0, 8)
    rgb = rng.uniform(0.05, 0.95, (8, 3))
    t = np.sort(rng.uniform(0.5, 2.0, 8))
    tg = targets(rng.random(3), [rng.uniform(0.5, 2.0)], [True], [40.0])

    def loss(sig, col):
        b = RaySampleBatch(np.array([0, 8]), t, np.zeros((8, 3)), np.zeros((8, 3)),
                           np.zeros(8, np.int32), sig, col, None, 0.3)
        r = composite(b, WHITE)
        return total_loss(r.color, r.depth, tg), b, r

    lr, b, r = loss(sigma, rgb)
    g_sigma, g_rgb = composite_backward(b, r, WHITE, lr.g_color, lr.g_depth, 0.0)
    h = 1e-6
    for k in range(8):
        sp, sm = sigma.copy(), sigma.copy()
        sp[k] += h
        sm[k] -= h
        fd = (loss(sp, rgb)[0].value - loss(sm, rgb)[0].value) / (2 * h)
        assert abs(fd - g_sigma[k]) <= 1e-4 * max(abs(fd), 1e-3)
        for c in range(3):
            cp, cm = rgb.copy(), rgb.copy()
            cp[k, c] += h
            cm[k, c] -= h
            fd = (loss(sigma, cp)[0].value - loss(sigma, cm)[0].value) / (2 * h)
            assert abs(fd - g_rgb[k, c]) <= 1e-4 * max(abs(fd), 1e-3)


def test_loss_to_parameters_chain(backend, small_grid):
    # 1 ray, 4 samples, float64 field: loss -> composite -> both MLPs -> hash tables
    rng = np.random.default_rng(11)
    fld = RadianceField(small_grid, dtype=np.float64)
    fld.initialize(rng)
    n_tab = int(np.prod(fld.shapes[0]))
    fld.params[:n_tab] = rng.uniform(-1, 1, n_tab)
    canon = rng.uniform(0.2, 0.8, (4, 3))
    expr = np.tile(rng.normal(size=16), (4, 1))
    sh = encode_direction(rng.normal(size=3))[None].repeat(4, 0)
    t = np.array([1.0, 1.1, 1.2, 1.3])
    tg = targets([0.9, 0.1, 0.4], [1.05], [True], [1.0])

    def run():
        dens, state = fld.density(canon, expr)
        rgb, state = fld.color(state, sh)
        b = RaySampleBatch(np.array([0, 4]), t, canon, canon, np.zeros(4, np.int32), dens, rgb,
                           state, 0.4)
        r = composite(b, WHITE)
        return total_loss(r.color, r.depth, tg), b, r

    lr, b, r = run()
    g_sigma, g_rgb = composite_backward(b, r, WHITE, lr.g_color, lr.g_depth, 0.0)
    grad = np.zeros_like(fld.params)
    fld.backward(b.state, g_sigma, g_rgb, grad)
    touched = np.flatnonzero(grad[:n_tab])
    assert 0 < len(touched) <= 4 * 8 * small_grid.levels * small_grid.features_per_entry
    picks = np.concatenate([rng.choice(touched, 20, replace=False),
                            n_tab + rng.choice(fld.size - n_tab, 40, replace=False)])
    h = 1e-6
    for i in picks:
        old = fld.params[i]
        fld.params[i] = old + h
        fp = run()[0].value
        fld.params[i] = old - h
        fm = run()[0].value
        fld.params[i] = old
        fd = (fp - fm) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-3 * max(abs(fd), 1e-4), (i, fd, grad[i])


# ---------------------------------------------------------------- schedule and loop


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(rays_per_step=0)
    with pytest.raises(ValueError):
        TrainConfig(huber_rho=-1)
    d = TrainConfig()
    assert (d.total_steps, d.buffer_size, d.resample_period) == (32000, 1700, 1500)
    assert (d.lambda_geom, d.huber_rho, d.learning_rate) == (1.25, 0.1, 2.5e-3)


def test_training_frames_holdout(tiny_scene, small_grid):
    assert len(training_frames(tiny_scene, tiny_cfg(small_grid, holdout_last=1))) == 3
    sub = training_frames(tiny_scene, tiny_cfg(small_grid, frame_subset=(0, 2)))
    assert [f.frame_id for f in sub] == [tiny_scene.frames[0].frame_id, tiny_scene.frames[2].frame_id]
    with pytest.raises(ValueError):
        training_frames(tiny_scene, tiny_cfg(small_grid, holdout_last=4))


def test_buffer_holds_min_of_size_and_frames():
    assert len(trainer_mod._buffer(0, 0, 60, 1700)) == 60
    b = trainer_mod._buffer(0, 0, 5000, 1700)
    assert len(b) == 1700 and len(np.unique(b)) == 1700 and b.max() < 5000


def test_buffer_resampled_exactly_on_period(tiny_scene, small_grid, monkeypatch):
    calls = []
    real = trainer_mod._buffer

    def spy(seed, epoch, n, size):
        calls.append(epoch)
        return real(seed, epoch, n, size)

    monkeypatch.setattr(trainer_mod, "_buffer", spy)
    steps = []
    train(tiny_scene, tiny_cfg(small_grid, total_steps=11, resample_period=4),
          log=lambda e: steps.append(e.step))
    assert calls == [0, 1, 2]  # steps 0, 4, 8
    assert steps == list(range(11))


def test_zero_steps_returns_initialization(tiny_scene, small_grid):
    ck = train(tiny_scene, tiny_cfg(small_grid, total_steps=0))
    fresh = RadianceField(ck.grid_config)
    fresh.initialize(np.random.default_rng([5, 0x1417]))
    assert np.array_equal(ck.params, fresh.params)
    assert np.array_equal(ck.shadow, fresh.params)
    assert not ck.adam_m.any() and not ck.adam_v.any() and ck.adam_step == 0


def test_same_seed_is_bit_identical(tiny_scene, small_grid):
    a = train(tiny_scene, tiny_cfg(small_grid))
    b = train(tiny_scene, tiny_cfg(small_grid))
    assert_checkpoints_equal(a, b)
    c = train(tiny_scene, tiny_cfg(small_grid, seed=6))
    assert not np.array_equal(a.params, c.params)


def test_resume_matches_uninterrupted(tiny_scene, small_grid, tmp_path):
    full = train(tiny_scene, tiny_cfg(small_grid, total_steps=8, resample_period=3))
    half = train(tiny_scene, tiny_cfg(small_grid, total_steps=5, resample_period=3))
    save_checkpoint(half, tmp_path / "half.ckpt")
    resumed = train(tiny_scene, tiny_cfg(small_grid, total_steps=8, resample_period=3),
                    resume=load_checkpoint(tmp_path / "half.ckpt"))
    assert_checkpoints_equal(full, resumed)


def test_loss_log_and_descent(tiny_scene, small_grid):
    log = []
    train(tiny_scene, tiny_cfg(small_grid, total_steps=60, rays_per_step=128), log=log.append)
    assert all(math.isfinite(e.loss) and e.loss >= 0 for e in log)
    assert np.mean([e.loss for e in log[-10:]]) < np.mean([e.loss for e in log[:10]])


def test_evaluate_reports_finite_metrics(tiny_scene, small_grid):
    ck = train(tiny_scene, tiny_cfg(small_grid, total_steps=0))
    res = evaluate(ck, tiny_scene, [2, 3])
    assert len(res.per_frame) == 2
    assert math.isfinite(res.psnr) and 0 <= res.mse <= 1 and -1 <= res.ssim <= 1
    side = evaluate(ck, tiny_scene, [3], yaw_offset=60.0)
    assert side.depth_mae is not None and side.depth_mae >= 0


# ---------------------------------------------------------------- metrics


def test_metrics():
    a = np.random.default_rng(0).random((16, 16, 3))
    assert mse(a, a) == 0 and psnr(a, a) == math.inf
    assert ssim(a, a) == pytest.approx(1.0)
    b = np.clip(a + 0.1, 0, 1)
    assert psnr(a, np.full_like(a, 0.0) + a + 0.1) == pytest.approx(20.0)
    assert ssim(a, b) < 1.0
    assert ssim(a, np.random.default_rng(1).random((16, 16, 3))) < 0.2


# ---------------------------------------------------------------- expression transfer


def test_transfer_examples():
    z = np.zeros(16)
    s = np.random.default_rng(0).normal(size=16)
    tn = np.random.default_rng(1).normal(size=16)
    assert np.array_equal(transfer_expression([s], s, tn)[0], tn)
    np.testing.assert_allclose(transfer_expression([s], z, tn)[0], tn + s)
    e = lambda v: np.r_[v, np.zeros(15)]
    np.testing.assert_allclose(transfer_expression([e(1.0)], e(0.5), e(0.2))[0], e(0.7))


def test_transfer_rejects_wrong_lengths():
    with pytest.raises(LengthMismatch):
        transfer_expression([np.zeros(15)], np.zeros(16), np.zeros(16))
    with pytest.raises(LengthMismatch):
        transfer_expression([np.zeros(16)], np.zeros(17), np.zeros(16))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_transfer_is_affine_with_unit_slope(seed, k):
    rng = np.random.default_rng(seed)
    s1, s2, sn, tn = rng.normal(size=(4, 16))
    t1, t2, tm = transfer_expression([s1, s2, s1 + k * (s2 - s1)], sn, tn)
    np.testing.assert_allclose(tm, t1 + k * (t2 - t1), atol=1e-9)
    np.testing.assert_allclose(t2 - t1, s2 - s1, atol=1e-12)
