"""Time the compiled core against the numpy fallback on each hot kernel.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one tab-separated row per kernel: name, fallback ms, compiled ms, speedup.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dnrf import _backend, _fallback, bvh, encoding, network, renderer
from dnrf.dataset import icosphere
from dnrf.encoding import HashGrid, HashGridConfig
from dnrf.network import AdamState, adam_step
from dnrf.renderer import (
    FrameGeometry,
    GeometryStack,
    MarchContext,
    OccupancyGrid,
    RaySampleBatch,
    composite,
    composite_backward,
    intersect_box,
    march_rays,
)

MODULES = (bvh, encoding, network, renderer)


def use(impl) -> None:
    for mod in MODULES:
        mod.kernels = impl


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def cases(rng):
    canon = icosphere()
    deformed = canon.with_vertices(canon.vertices * 1.05)
    geo = GeometryStack([FrameGeometry(deformed, canon)])
    tree = geo.frames[0].bvh
    pts = rng.uniform(-0.15, 0.15, (20000, 3))
    ids = np.zeros(len(pts), np.int32)

    cfg = HashGridConfig(levels=16, table_size=2**14, features_per_entry=2, finest_resolution=512)
    grid = HashGrid(cfg, rng.uniform(-1e-2, 1e-2, (16, 2**14, 2)).astype(np.float32))
    x = rng.random((20000, 3))
    up = rng.normal(size=(20000, cfg.output_dim)).astype(np.float32)
    g_tables = np.zeros_like(grid.tables)

    occ = OccupancyGrid(np.full(3, -0.2), np.full(3, 0.2))
    occ.seed_from_meshes([deformed])
    ctx = MarchContext(geo, np.ones((1, 16)), np.zeros(canon.n_faces, bool), occ)

    class Constant:
        global_conditioning = False

        def density(self, canon_pts, expression):
            return np.full(len(canon_pts), 50.0), {"n": np.arange(len(canon_pts))}

        def color(self, state, sh):
            return np.full((len(state["n"]), 3), 0.5), state

    o = np.tile([0.0, 0.0, 0.6], (1024, 1)) + rng.normal(0, 0.03, (1024, 3))
    d = rng.normal([0, 0, -1], 0.15, (1024, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far = intersect_box(o, d, occ.box_min, occ.box_max)

    counts = rng.integers(1, 64, 4096)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    m = int(offsets[-1])
    batch = RaySampleBatch(offsets, np.arange(m) * 1e-3, np.zeros((m, 3)), np.zeros((m, 3)),
                           np.zeros(m, np.int32), rng.exponential(50.0, m), rng.random((m, 3)))
    res = composite(batch, np.ones(3))
    ones3, ones = np.ones((4096, 3)), np.ones(4096)

    params = rng.normal(size=2**20).astype(np.float32)
    grads = rng.normal(size=2**20).astype(np.float32)
    state = AdamState.for_params(params)

    def fill_grad():
        g_tables[...] = 0
        grid.accumulate_gradient(x, up, g_tables)

    return [
        ("bvh query 20k points", lambda: tree.query(pts)),
        ("canonicalize 20k points", lambda: geo.canonicalize(pts, ids)),
        ("hash encode 20k x 16 levels", lambda: grid.encode(x)),
        ("hash backward 20k x 16 levels", fill_grad),
        ("march 1024 rays", lambda: march_rays(o, d, near, far, np.zeros(1024, np.int32), ctx,
                                               Constant())),
        ("composite 4096 rays", lambda: composite(batch, np.ones(3))),
        ("composite backward 4096 rays",
         lambda: composite_backward(batch, res, np.ones(3), ones3, ones, ones)),
        ("adam 1M params", lambda: adam_step(state, params, grads)),
    ]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _backend.compiled is None:
        print("compiled core not built; nothing to compare")
        return 1
    rows = []
    for name, fn in cases(np.random.default_rng(0)):
        use(_fallback)
        slow = best_of(fn, args.repeat)
        use(_backend.compiled)
        fast = best_of(fn, args.repeat)
        rows.append((name, slow, fast))
    use(_backend.kernels)
    print("kernel\tfallback_ms\tcompiled_ms\tspeedup")
    for name, slow, fast in rows:
        print(f"{name}\t{slow:.2f}\t{fast:.2f}\t{slow / fast:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
