import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnrf import _fallback
from dnrf.encoding import HashGridConfig
from dnrf.errors import NonFiniteGradient, ShapeMismatch, TapeMismatch
from dnrf.network import (
    AdamState,
    Mlp,
    RadianceField,
    adam_step,
    as_expression,
    color_forward,
    constant_expression,
    density_forward,
    joint_backward,
)

N_HASH = 128


def make_nets(seed=0, dtype=np.float64, bias_scale=0.0):
    rng = np.random.default_rng(seed)
    dn = Mlp([N_HASH + 16, 64, 16])
    cn = Mlp([32, 64, 3], output_activation="sigmoid")
    for net in (dn, cn):
        net.bind([np.zeros(s, dtype=dtype) for s in net.param_shapes()])
        net.initialize(rng)
        for b in net.biases:
            b[...] = rng.normal(scale=bias_scale, size=b.shape)
    return dn, cn


def straight_line(weights, biases, x, sigmoid=False):
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for col in range(w.shape[1]):
            acc = b[col]
            for row in range(w.shape[0]):
                acc += h[row] * w[row, col]
            out.append(acc)
        h = np.array(out)
        if i < len(weights) - 1:
            h = np.where(h > 0, h, 0.0)
    if sigmoid:
        h = 1.0 / (1.0 + np.exp(-h))
    return h


# ---------------------------------------------------------------- forward


def test_shapes_of_both_networks():
    f = RadianceField(HashGridConfig())
    assert f.density_net.widths == [144, 64, 16]
    assert f.color_net.widths == [32, 64, 3]
    assert f.size == RadianceField.parameter_count(HashGridConfig())


def test_zero_network_density_is_one():
    dn, _ = make_nets()
    for a in dn.weights + dn.biases:
        a[...] = 0
    sf, dens, _ = density_forward(dn, np.random.default_rng(0).normal(size=N_HASH), constant_expression())
    assert not np.any(sf) and dens == 1.0


def test_zero_input_zero_bias_gives_density_one():
    dn, _ = make_nets(3)
    sf, dens, _ = density_forward(dn, np.zeros(N_HASH), np.zeros(16))
    assert not np.any(sf) and dens == 1.0


def test_density_matches_straight_line_oracle():
    dn, _ = make_nets(1, bias_scale=0.1)
    rng = np.random.default_rng(1)
    h, e = rng.normal(size=N_HASH), rng.normal(size=16)
    sf, dens, _ = density_forward(dn, h, e)
    ref = straight_line(dn.weights, dn.biases, np.concatenate([h, e]))
    np.testing.assert_allclose(sf, ref, atol=1e-6)
    np.testing.assert_allclose(dens, np.exp(ref[0]), rtol=1e-6)


def test_zero_color_network_is_gray():
    _, cn = make_nets()
    for a in cn.weights + cn.biases:
        a[...] = 0
    rgb, _ = color_forward(cn, np.ones(16), np.ones(16))
    assert np.array_equal(rgb, [0.5, 0.5, 0.5])


def test_color_matches_straight_line_oracle():
    _, cn = make_nets(2, bias_scale=0.1)
    rng = np.random.default_rng(2)
    s, d = rng.normal(size=16), rng.normal(size=16)
    rgb, _ = color_forward(cn, s, d)
    np.testing.assert_allclose(rgb, straight_line(cn.weights, cn.biases, np.concatenate([s, d]), True),
                               atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50))
def test_outputs_in_range(seed, scale):
    dn, cn = make_nets(seed % 1000)
    rng = np.random.default_rng(seed)
    sf, dens, _ = density_forward(dn, rng.normal(scale=scale, size=(8, N_HASH)), rng.normal(size=16))
    assert np.all(dens >= 0) and np.all(np.isfinite(dens))
    rgb, _ = color_forward(cn, rng.normal(scale=scale, size=(8, 16)), rng.normal(size=(8, 16)))
    assert np.all((rgb >= 0) & (rgb <= 1))


def test_shape_mismatch():
    dn, cn = make_nets()
    with pytest.raises(ShapeMismatch):
        density_forward(dn, np.zeros(N_HASH - 1), np.zeros(16))
    with pytest.raises(ShapeMismatch):
        color_forward(cn, np.zeros(16), np.zeros(15))
    with pytest.raises(ShapeMismatch):
        as_expression(np.zeros(8))


# ---------------------------------------------------------------- backward


def test_zero_upstream_gives_zero_gradients():
    dn, cn = make_nets(4)
    rng = np.random.default_rng(4)
    sf, _, dt = density_forward(dn, rng.normal(size=(5, N_HASH)), rng.normal(size=16))
    _, ct = color_forward(cn, sf, rng.normal(size=(5, 16)))
    dg, cg, gh, ge = joint_backward(dn, cn, dt, ct, np.zeros(5), np.zeros((5, 3)))
    for g in dg + cg + [gh, ge]:
        assert not np.any(g)


def test_single_linear_layer_gradient_is_outer_product():
    net = Mlp([4, 3])
    net.bind([np.random.default_rng(0).normal(size=(4, 3)), np.zeros(3)])
    x = np.array([[1.0, -2.0, 0.5, 3.0]])
    _, tape = net.forward(x)
    up = np.array([[0.2, -1.0, 4.0]])
    grads, gin = net.backward(tape, up)
    np.testing.assert_allclose(grads[0], np.outer(x[0], up[0]))
    np.testing.assert_allclose(grads[1], up[0])
    np.testing.assert_allclose(gin, up @ net.weights[0].T)


def test_tape_from_other_network_rejected():
    dn, cn = make_nets()
    _, tape = dn.forward(np.zeros((1, N_HASH + 16)))
    with pytest.raises(TapeMismatch):
        cn.backward(tape, np.zeros((1, 16)))
    with pytest.raises(TapeMismatch):
        dn.backward(tape, np.zeros((2, 16)))


def pipeline_loss(dn, cn, h, e, d, wd, wc):
    sf, dens, _ = density_forward(dn, h, e)
    rgb, _ = color_forward(cn, sf, d)
    return float(wd @ dens + (wc * rgb).sum())


@pytest.mark.parametrize("seed", range(10))
def test_joint_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    dn, cn = make_nets(seed, bias_scale=0.05)
    for w in dn.weights:
        w *= 0.3  # keep log-density moderate so exp() stays well conditioned
    n = 3
    h, e, d = rng.normal(size=(n, N_HASH)), rng.normal(size=(n, 16)), rng.normal(size=(n, 16))
    wd, wc = rng.normal(size=n), rng.normal(size=(n, 3))
    sf, _, dt = density_forward(dn, h, e)
    _, ct = color_forward(cn, sf, d)
    dg, cg, gh, ge = joint_backward(dn, cn, dt, ct, wd, wc)
    eps = 1e-6
    for net, grads in ((dn, dg), (cn, cg)):
        arrays = [a for pair in zip(net.weights, net.biases) for a in pair]
        for arr, g in zip(arrays, grads):
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for k in rng.choice(flat.size, min(12, flat.size), replace=False):
                old = flat[k]
                flat[k] = old + eps
                fp = pipeline_loss(dn, cn, h, e, d, wd, wc)
                flat[k] = old - eps
                fm = pipeline_loss(dn, cn, h, e, d, wd, wc)
                flat[k] = old
                fd = (fp - fm) / (2 * eps)
                assert abs(fd - gflat[k]) <= 1e-4 * max(abs(fd), 1e-2)
    # input gradients
    for k in rng.choice(N_HASH, 6, replace=False):
        hp, hm = h.copy(), h.copy()
        hp[0, k] += eps
        hm[0, k] -= eps
        fd = (pipeline_loss(dn, cn, hp, e, d, wd, wc) - pipeline_loss(dn, cn, hm, e, d, wd, wc)) / (2 * eps)
        assert abs(fd - gh[0, k]) <= 1e-4 * max(abs(fd), 1e-2)


# ---------------------------------------------------------------- Adam + EMA


def test_default_hyperparameters():
    s = AdamState.for_params(np.zeros(3, dtype=np.float32))
    assert (s.lr, s.beta1, s.beta2, s.eps, s.ema_decay) == (2.5e-3, 0.9, 0.99, 1e-15, 0.95)
    assert np.array_equal(s.shadow, np.zeros(3))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_zero_gradient_keeps_params(dtype):
    p = np.array([1.0, -2.0, 3.0], dtype=dtype)
    s = AdamState.for_params(p)
    s.shadow[:] = 0.0
    adam_step(s, p, np.zeros_like(p))
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])
    np.testing.assert_allclose(s.shadow, 0.05 * p, rtol=1e-6)
    # existing moments decay under a zero gradient
    s.m[:] = 0.5
    s.v[:] = 0.25
    adam_step(s, p, np.zeros_like(p))
    np.testing.assert_allclose(s.m, 0.45, rtol=1e-6)
    np.testing.assert_allclose(s.v, 0.2475, rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6).filter(lambda g: abs(g) > 1e-30))
def test_first_step_is_bounded_by_lr(g):
    for dtype in (np.float32, np.float64):
        p = np.array([0.7], dtype=dtype)
        s = AdamState.for_params(p)
        adam_step(s, p, np.array([g], dtype=dtype))
        step = abs(float(p[0]) - 0.7)
        assert step <= 2.5e-3 * (1 + 1e-6) + 1e-7
        # a gradient far below eps gives a step under one ulp, leaving p in place
        assert np.sign(float(p[0]) - 0.7) in (0.0, -np.sign(g))


def test_adam_minimizes_convex_scalar():
    # at the default rate 200 steps cannot travel 3 units, so use 0.1
    x = np.array([0.0])
    s = AdamState.for_params(x, lr=0.1)
    for _ in range(200):
        adam_step(s, x, 2 * (x - 3.0))
    assert abs(x[0] - 3.0) < 0.05


def test_ema_contracts_geometrically():
    p = np.full(4, 2.0, dtype=np.float64)
    s = AdamState.for_params(p)
    s.shadow[:] = 0.0
    gaps = []
    for _ in range(20):
        adam_step(s, p, np.zeros(4))
        gaps.append(2.0 - s.shadow[0])
    np.testing.assert_allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.95, rtol=1e-9)


def test_non_finite_gradient_aborts():
    p = np.ones(3, dtype=np.float32)
    s = AdamState.for_params(p)
    with pytest.raises(NonFiniteGradient) as exc:
        adam_step(s, p, np.array([0.0, np.nan, 1.0], dtype=np.float32))
    assert exc.value.step == 1
    assert np.array_equal(p, np.ones(3)) and s.step == 0


def test_compiled_and_fallback_adam_agree(backend):
    rng = np.random.default_rng(0)
    p1 = rng.normal(size=1000).astype(np.float32)
    p2 = p1.copy()
    s1, s2 = AdamState.for_params(p1), AdamState.for_params(p2)
    for _ in range(10):
        g = rng.normal(size=1000).astype(np.float32)
        adam_step(s1, p1, g)
        backend.adam_update(p2, g, s2.m, s2.v, s2.shadow, s2.lr, s2.beta1, s2.beta2, s2.eps,
                            s2.step + 1, s2.ema_decay)
        s2.step += 1
    np.testing.assert_allclose(p1, p2, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(s1.shadow, s2.shadow, rtol=1e-6, atol=1e-7)


def test_seeded_init_is_deterministic(small_grid):
    a = RadianceField(small_grid)
    b = RadianceField(small_grid)
    a.initialize(np.random.default_rng(5))
    b.initialize(np.random.default_rng(5))
    assert np.array_equal(a.params, b.params)
    assert np.all(np.abs(a.grid.tables) <= 1e-4)
    assert not np.any(a.density_net.biases[0])


def test_fallback_adam_matches_reference_formula():
    rng = np.random.default_rng(1)
    p = rng.normal(size=5)
    g = rng.normal(size=5)
    m = np.zeros(5)
    v = np.zeros(5)
    sh = p.copy()
    ref = p.copy()
    _fallback.adam_update(p, g, m, v, sh, 0.01, 0.9, 0.99, 1e-8, 1, 0.95)
    mh = 0.1 * g / 0.1
    vh = 0.01 * g * g / 0.01
    ref -= 0.01 * mh / (np.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)
