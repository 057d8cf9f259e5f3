import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import sph_harm_y

from dnrf.encoding import (
    PRIME_Y,
    PRIME_Z,
    HashGrid,
    HashGridConfig,
    encode_direction,
    encode_position,
    encode_position_backward,
    sh_encode,
    spatial_hash,
)
from dnrf.errors import ZeroDirection


def hash_np(cells, table_size):
    """Vectorized oracle of the corner hash."""
    c = cells.astype(np.uint64) & np.uint64(0xFFFFFFFF)
    mask = np.uint64(0xFFFFFFFF)
    h = c[:, 0] ^ ((c[:, 1] * np.uint64(PRIME_Y)) & mask) ^ ((c[:, 2] * np.uint64(PRIME_Z)) & mask)
    return (h % np.uint64(table_size)).astype(np.int64)


def grid64(cfg, seed=0, scale=1.0):
    g = HashGrid(cfg, dtype=np.float64)
    g.tables[...] = np.random.default_rng(seed).uniform(-scale, scale, g.tables.shape)
    return g


# ---------------------------------------------------------------- config


def test_default_config():
    cfg = HashGridConfig()
    assert (cfg.levels, cfg.table_size, cfg.features_per_entry) == (16, 2**18, 8)
    assert (cfg.base_resolution, cfg.finest_resolution) == (16, 2048)
    assert cfg.output_dim == 128
    res = cfg.resolutions()
    assert res[0] == 16 and abs(res[-1] - 2048) <= 1
    assert np.all(np.diff(res) > 0)
    b = cfg.growth
    assert res.tolist() == [math.floor(16 * b**lvl) for lvl in range(16)]


@pytest.mark.parametrize("kw", [dict(levels=0), dict(table_size=1000), dict(base_resolution=64,
                                finest_resolution=32)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        HashGridConfig(**kw)


# ---------------------------------------------------------------- spatial hash


def test_hash_of_origin_is_zero():
    assert spatial_hash((0, 0, 0), 2**18) == 0


def test_hash_is_deterministic_and_matches_oracle():
    rng = np.random.default_rng(0)
    cells = rng.integers(0, 4096, (1000, 3))
    ref = hash_np(cells, 2**18)
    for c, r in zip(cells[:200], ref[:200]):
        assert spatial_hash(tuple(c), 2**18) == r == spatial_hash(tuple(c), 2**18)


def test_hash_uniformity_over_deciles():
    rng = np.random.default_rng(1)
    cells = rng.integers(0, 2048, (10**6, 3))
    idx = hash_np(cells, 2**18)
    counts = np.bincount(idx * 10 // 2**18, minlength=10)
    assert np.all(np.abs(counts - 10**5) <= 0.05 * 10**5)


def test_dense_levels_below_collision_threshold(small_grid):
    g = HashGrid(small_grid)
    for lvl, n in enumerate(g.resolutions):
        assert g.is_dense(lvl) == ((n + 1) ** 3 <= small_grid.table_size)
    assert g.is_dense(0) and not g.is_dense(small_grid.levels - 1)


# ---------------------------------------------------------------- forward


def test_grid_corner_returns_entry_exactly(backend, small_grid):
    g = grid64(small_grid)
    nf = small_grid.features_per_entry
    for lvl, n in enumerate(g.resolutions):
        p = np.array([3, 1, 2]) / n
        idx, w = g.corner_lookup(lvl, p)
        k = int(np.argmax(w))
        assert w[k] == 1.0
        out = encode_position(g, p)
        assert np.array_equal(out[lvl * nf:(lvl + 1) * nf], g.tables[lvl, idx[k]])


def test_zero_tables_give_zero_features(backend, small_grid):
    g = HashGrid(small_grid)
    assert not np.any(g.encode(np.random.default_rng(0).random((50, 3))))


@pytest.mark.parametrize("level", [0, 3])
def test_hand_unrolled_trilinear_oracle(backend, small_grid, level):
    g = grid64(small_grid, seed=2)
    nf = small_grid.features_per_entry
    n = int(g.resolutions[level])
    dense = g.is_dense(level)
    rng = np.random.default_rng(level)
    for p in rng.random((20, 3)):
        pos = p * n
        i0 = np.floor(pos).astype(int)
        fx, fy, fz = pos - i0

        def entry(dx, dy, dz):
            x, y, z = i0[0] + dx, i0[1] + dy, i0[2] + dz
            if dense:
                return g.tables[level, x + (n + 1) * (y + (n + 1) * z)]
            return g.tables[level, hash_np(np.array([[x, y, z]]), small_grid.table_size)[0]]

        ref = (entry(0, 0, 0) * (1 - fx) * (1 - fy) * (1 - fz)
               + entry(1, 0, 0) * fx * (1 - fy) * (1 - fz)
               + entry(0, 1, 0) * (1 - fx) * fy * (1 - fz)
               + entry(1, 1, 0) * fx * fy * (1 - fz)
               + entry(0, 0, 1) * (1 - fx) * (1 - fy) * fz
               + entry(1, 0, 1) * fx * (1 - fy) * fz
               + entry(0, 1, 1) * (1 - fx) * fy * fz
               + entry(1, 1, 1) * fx * fy * fz)
        out = encode_position(g, p)[level * nf:(level + 1) * nf]
        np.testing.assert_allclose(out, ref, atol=1e-6)


def test_points_outside_box_are_clamped(backend, small_grid):
    g = grid64(small_grid)
    inside = g.encode(np.array([[1.0, 0.5, 0.0]]))
    outside = g.encode(np.array([[1.7, 0.5, -3.0]]))
    assert np.array_equal(inside, outside)


def test_box_normalization():
    cfg = HashGridConfig(levels=2, table_size=2**12, features_per_entry=2, base_resolution=4,
                         finest_resolution=8, box_min=(-1, -1, -1), box_max=(1, 1, 1))
    g = grid64(cfg)
    unit = HashGrid(HashGridConfig(levels=2, table_size=2**12, features_per_entry=2,
                                   base_resolution=4, finest_resolution=8), g.tables)
    np.testing.assert_array_equal(g.encode([[0.0, 0.5, -1.0]]), unit.encode([[0.5, 0.75, 0.0]]))


def test_float32_matches_float64(backend, small_grid):
    g = grid64(small_grid)
    g32 = HashGrid(small_grid, g.tables.astype(np.float32))
    pts = np.random.default_rng(0).random((100, 3))
    np.testing.assert_allclose(g32.encode(pts), g.encode(pts), atol=1e-6)


# ---------------------------------------------------------------- backward


def test_zero_upstream_gives_empty_gradient(small_grid):
    g = grid64(small_grid)
    assert len(encode_position_backward(g, (0.3, 0.4, 0.5), np.zeros(small_grid.output_dim))) == 0


def test_corner_routes_everything_to_one_entry(small_grid):
    g = grid64(small_grid)
    up = np.random.default_rng(0).normal(size=small_grid.output_dim)
    p = np.array([0.5, 0.25, 0.75])  # a lattice corner at every level of the config
    sg = encode_position_backward(g, p, up)
    assert len(sg) == small_grid.levels
    nf = small_grid.features_per_entry
    for k, lvl in enumerate(sg.levels):
        np.testing.assert_allclose(sg.values[k], up[lvl * nf:(lvl + 1) * nf])


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(backend, small_grid, seed):
    rng = np.random.default_rng(seed)
    g = grid64(small_grid, seed)
    p = rng.random(3)
    up = rng.normal(size=small_grid.output_dim)
    sg = encode_position_backward(g, p, up)
    assert len(sg) <= 8 * small_grid.levels
    dense = np.zeros_like(g.tables)
    g.accumulate_gradient(p[None], up[None], dense)
    np.testing.assert_allclose(dense, sg.to_dense(g.tables.shape), atol=1e-12)
    h = 1e-6
    for lvl, idx in zip(sg.levels, sg.indices):
        for f in range(small_grid.features_per_entry):
            old = g.tables[lvl, idx, f]
            g.tables[lvl, idx, f] = old + h
            fp = encode_position(g, p) @ up
            g.tables[lvl, idx, f] = old - h
            fm = encode_position(g, p) @ up
            g.tables[lvl, idx, f] = old
            assert abs((fp - fm) / (2 * h) - dense[lvl, idx, f]) < 1e-5
    # untouched entries get exactly zero
    touched = np.zeros(g.tables.shape[:2], dtype=bool)
    touched[sg.levels, sg.indices] = True
    assert not np.any(dense[~touched])


def test_batched_backward_is_sum_of_single(backend, small_grid):
    g = grid64(small_grid)
    rng = np.random.default_rng(4)
    pts = rng.random((30, 3))
    up = rng.normal(size=(30, small_grid.output_dim))
    batched = np.zeros_like(g.tables)
    g.accumulate_gradient(pts, up, batched)
    single = sum(encode_position_backward(g, p, u).to_dense(g.tables.shape) for p, u in zip(pts, up))
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_encoding_is_pure(backend, small_grid):
    g = grid64(small_grid)
    pts = np.random.default_rng(0).random((64, 3))
    assert np.array_equal(g.encode(pts), g.encode(pts.copy()))


# ---------------------------------------------------------------- spherical harmonics


def real_sh_oracle(v):
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    theta = np.arccos(np.clip(v[:, 2], -1, 1))
    phi = np.arctan2(v[:, 1], v[:, 0])
    cols = []
    for l in range(4):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), theta, phi)
            if m > 0:
                cols.append(math.sqrt(2) * (-1) ** m * y.real)
            elif m < 0:
                cols.append(math.sqrt(2) * (-1) ** m * y.imag)
            else:
                cols.append(y.real)
    return np.stack(cols, axis=1)


def test_constant_band():
    v = np.random.default_rng(0).normal(size=(100, 3))
    np.testing.assert_allclose(sh_encode(v)[:, 0], 0.28209479, atol=1e-7)
    assert encode_direction((0, 0, 1)).shape == (16,)


def test_pole_has_only_zonal_terms():
    d = encode_direction((0.0, 0.0, 1.0))
    zonal = [0, 2, 6, 12]
    others = [i for i in range(16) if i not in zonal]
    np.testing.assert_allclose(d[others], 0.0, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(-10, 10) for _ in range(3)]).filter(lambda t: np.linalg.norm(t) > 1e-3),
       st.floats(0.01, 100))
def test_scale_invariance(v, s):
    np.testing.assert_allclose(encode_direction(v), encode_direction(np.array(v) * s), atol=1e-12)


def test_matches_complex_harmonics():
    v = np.random.default_rng(1).normal(size=(500, 3))
    np.testing.assert_allclose(sh_encode(v), real_sh_oracle(v), atol=1e-12)


def test_orthonormal_on_sphere():
    # Fibonacci-sphere quadrature of the Gram matrix
    n = 20000
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = math.pi * (1 + math.sqrt(5)) * k
    r = np.sqrt(1 - z * z)
    y = sh_encode(np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1))
    gram = 4 * math.pi * (y.T @ y) / n
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-3)


def test_zero_direction_rejected():
    with pytest.raises(ZeroDirection):
        encode_direction((0, 0, 0))
