"""Pure numpy implementations of the compiled kernels.

Signatures and semantics mirror ``_core.pyx`` one-for-one. These are
vectorised where numpy makes that natural and otherwise favour clarity;
they exist so the package works without a C toolchain and so the two
paths can be cross-checked.
"""

from __future__ import annotations

import numpy as np

NAME = "fallback"
HAVE_OPENMP = False

PRIME_Y = np.uint32(2654435761)
PRIME_Z = np.uint32(805459861)

_num_threads = 1


def set_num_threads(n: int) -> None:
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads() -> int:
    return _num_threads


# ---------------------------------------------------------------- geometry


def _closest_on_triangles(p, a, b, c):
    """Vectorised closest point on triangles (Voronoi-region classification)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        q = a + ab * (vb * denom)[:, None] + ac * (vc * denom)[:, None]
        done = np.zeros(len(p), dtype=bool)

        def assign(mask, value):
            nonlocal done
            m = mask & ~done
            q[m] = value[m]
            done |= m

        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
    diff = p - q
    return np.einsum("ij,ij->i", diff, diff), q


def closest_points_on_triangles(points, tris):
    d2, q = _closest_on_triangles(points, tris[:, 0], tris[:, 1], tris[:, 2])
    return np.sqrt(d2), q


def _aabb_dist2(points, lo, hi):
    e = np.maximum(np.maximum(lo - points, points - hi), 0.0)
    return np.einsum("...j,...j->...", e, e)


def bvh_nearest(points, node_min, node_max, left, right, start, count, order, tri):
    """Branch-and-bound over leaf boxes, vectorised across queries.

    An upper bound per query comes from greedily descending to one leaf;
    every leaf whose box lower bound does not exceed it is then scanned.
    """
    n = len(points)
    leaves = np.flatnonzero(left < 0)
    # greedy descent for an initial upper bound
    node = np.zeros(n, dtype=np.int64)
    inner = left[node] >= 0
    while inner.any():
        idx = np.flatnonzero(inner)
        l_child = left[node[idx]]
        r_child = right[node[idx]]
        dl = _aabb_dist2(points[idx], node_min[l_child], node_max[l_child])
        dr = _aabb_dist2(points[idx], node_min[r_child], node_max[r_child])
        node[idx] = np.where(dl <= dr, l_child, r_child)
        inner = left[node] >= 0

    best = np.full(n, np.inf)
    best_f = np.full(n, np.iinfo(np.int32).max, dtype=np.int64)
    best_q = np.zeros((n, 3))

    def scan(qidx, leaf_ids):
        for leaf in np.unique(leaf_ids):
            sel = qidx[leaf_ids == leaf]
            for k in range(start[leaf], start[leaf] + count[leaf]):
                f = order[k]
                t = tri[f]
                m = len(sel)
                d2, q = _closest_on_triangles(
                    points[sel], np.broadcast_to(t[0], (m, 3)), np.broadcast_to(t[1], (m, 3)),
                    np.broadcast_to(t[2], (m, 3))
                )
                better = (d2 < best[sel]) | ((d2 == best[sel]) & (f < best_f[sel]))
                upd = sel[better]
                best[upd] = d2[better]
                best_f[upd] = f
                best_q[upd] = q[better]

    scan(np.arange(n), node)
    lb = _aabb_dist2(points[:, None, :], node_min[leaves][None], node_max[leaves][None])
    cand_q, cand_l = np.nonzero(lb <= best[:, None])
    scan(cand_q, leaves[cand_l])
    return best_f.astype(np.int32), np.sqrt(best), best_q


def canonicalize_points(points, frame_ids, node_min, node_max, left, right, start, count,
                        order, tri, grads, centroids, adjacency, beta_adjacent, beta_self):
    n = len(points)
    canon = np.empty((n, 3))
    faces = np.empty(n, dtype=np.int32)
    for k in np.unique(frame_ids):
        sel = np.flatnonzero(frame_ids == k)
        p = points[sel]
        f, _, _ = bvh_nearest(p, node_min[k], node_max[k], left[k], right[k], start[k],
                              count[k], order[k], tri[k])
        faces[sel] = f
        members = np.concatenate([f[:, None], adjacency[f]], axis=1)
        valid = members >= 0
        safe = np.where(valid, members, 0)
        dist = np.linalg.norm(centroids[k][safe] - p[:, None, :], axis=2)
        beta = np.full(members.shape, beta_adjacent)
        beta[:, 0] = beta_self
        w = np.where(valid, np.exp(-beta * dist), 0.0)
        blend = np.einsum("nj,njab->nab", w, grads[k][safe]) / w.sum(axis=1)[:, None, None]
        canon[sel] = np.einsum("nab,nb->na", blend[:, :, :3], p) + blend[:, :, 3]
    return canon, faces


# ---------------------------------------------------------------- hash grid


def _corners(x_unit, res, table_size):
    """Corner table indices (n, 8) and trilinear weights (n, 8) for one level."""
    pos = x_unit * res
    base = np.clip(np.floor(pos).astype(np.int64), 0, res - 1)
    frac = pos - base
    offs = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)
    cell = base[:, None, :] + offs[None]
    w = np.prod(np.where(offs[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
    if (res + 1) ** 3 <= table_size:
        idx = cell[..., 0] + (res + 1) * (cell[..., 1] + (res + 1) * cell[..., 2])
    else:
        c32 = cell.astype(np.uint32)
        with np.errstate(over="ignore"):
            h = c32[..., 0] ^ (c32[..., 1] * PRIME_Y) ^ (c32[..., 2] * PRIME_Z)
        idx = (h & np.uint32(table_size - 1)).astype(np.int64)
    return idx, w


def hash_encode_forward(x_unit, tables, resolutions, out):
    n_feat = tables.shape[2]
    for lvl, res in enumerate(resolutions):
        idx, w = _corners(x_unit, int(res), tables.shape[1])
        vals = tables[lvl][idx]  # (n, 8, F)
        out[:, lvl * n_feat:(lvl + 1) * n_feat] = np.einsum("nc,ncf->nf", w, vals).astype(out.dtype)


def hash_encode_backward(x_unit, grad_out, resolutions, grad_tables):
    n_feat = grad_tables.shape[2]
    for lvl, res in enumerate(resolutions):
        idx, w = _corners(x_unit, int(res), grad_tables.shape[1])
        g = grad_out[:, lvl * n_feat:(lvl + 1) * n_feat]
        contrib = (w[:, :, None] * g[:, None, :]).reshape(-1, n_feat)
        np.add.at(grad_tables[lvl], idx.reshape(-1), contrib.astype(grad_tables.dtype))


# ---------------------------------------------------------------- marching


def march_occupied(origins, dirs, t_cur, t_far, step, bits, box_min, box_max, res, max_per_ray):
    n = len(origins)
    counts = np.zeros(n, dtype=np.int32)
    t_out = np.empty((n, max_per_ray))
    scale = res / (np.asarray(box_max) - np.asarray(box_min))
    # march all rays in lockstep one step at a time
    t = t_cur.copy()
    active = t < t_far
    while active.any():
        idx = np.flatnonzero(active)
        p = origins[idx] + t[idx, None] * dirs[idx]
        cell = np.clip(np.floor((p - box_min) * scale).astype(np.int64), 0, res - 1)
        occ = bits[(cell[:, 2] * res + cell[:, 1]) * res + cell[:, 0]] != 0
        hit = idx[occ]
        t_out[hit, counts[hit]] = t[hit]
        counts[hit] += 1
        t[idx] += step
        active = (t < t_far) & (counts < max_per_ray)
    t_cur[:] = t
    return counts, t_out


def _segment_ids(offsets):
    return np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))


def _exclusive_segment_cumsum(values, offsets):
    # padded per-segment rows so no sum ever crosses a segment boundary;
    # subtracting global prefix totals loses precision next to huge values
    seg = _segment_ids(offsets)
    if len(values) == 0:
        return np.zeros(0)
    rank = np.arange(len(values)) - offsets[:-1][seg]
    width = int(rank.max()) + 1
    rows = np.zeros((len(offsets) - 1, width + 1))
    rows[seg, rank + 1] = values
    return np.cumsum(rows, axis=1)[seg, rank]


def accumulate_transmittance(sigma, offsets, delta, trans, threshold):
    n = len(offsets) - 1
    seg = _segment_ids(offsets)
    # transmittance before each sample, starting from the carried-in value
    before = trans[seg] * np.exp(-delta * _exclusive_segment_cumsum(sigma, offsets))
    live = before >= threshold
    # a ray stops at its first dead sample; everything after is dropped too
    dead_rank = np.cumsum(~live)
    dead_before = dead_rank - _segment_ids_start(dead_rank, offsets, seg)
    keep = live & (dead_before == 0)
    kept = np.bincount(seg[keep], minlength=n).astype(np.int64)
    after = before * np.exp(-delta * sigma)
    last = offsets[:-1] + kept - 1
    has = kept > 0
    trans[has] = after[last[has]]
    return kept


def _segment_ids_start(running, offsets, seg):
    start_vals = np.concatenate([[0], running])[offsets[:-1]]
    return start_vals[seg]


def composite_forward(sigma, rgb, t, offsets, delta, background, threshold):
    n = len(offsets) - 1
    m = len(sigma)
    trans = np.ones(n)
    used = accumulate_transmittance(sigma, offsets, delta, trans, threshold)
    seg = _segment_ids(offsets)
    rank = np.arange(m) - offsets[:-1][seg]
    keep = rank < used[seg]
    t_before = np.exp(-delta * _exclusive_segment_cumsum(sigma, offsets))
    t_before = np.where(keep, t_before, 0.0)
    alpha = -np.expm1(-sigma * delta)
    w = np.where(keep, t_before * alpha, 0.0)
    color = np.zeros((n, 3))
    np.add.at(color, seg, w[:, None] * rgb)
    depth = np.bincount(seg, weights=w * t, minlength=n)
    opacity = np.bincount(seg, weights=w, minlength=n)
    color += trans[:, None] * np.asarray(background)[None]
    return color, depth, opacity, trans, used, t_before


def composite_backward(sigma, rgb, t, offsets, delta, background, t_final, used, t_before,
                       g_color, g_depth, g_opacity):
    m = len(sigma)
    seg = _segment_ids(offsets)
    rank = np.arange(m) - offsets[:-1][seg]
    keep = rank < used[seg]
    alpha = -np.expm1(-sigma * delta)
    w = np.where(keep, t_before * alpha, 0.0)
    t_after = np.where(keep, t_before * np.exp(-sigma * delta), 0.0)
    val = np.einsum("ij,ij->i", g_color[seg], rgb) + g_depth[seg] * t + g_opacity[seg]
    wv = w * val
    # inclusive suffix sum within each segment, then shift to exclusive
    rev_c = np.cumsum(wv[::-1])[::-1]
    seg_end_total = np.concatenate([rev_c, [0.0]])[offsets[1:]]
    suffix = rev_c - wv - seg_end_total[seg]
    tail = t_final * (g_color @ np.asarray(background))
    g_sigma = np.where(keep, delta * (t_after * val - suffix - tail[seg]), 0.0)
    g_rgb = w[:, None] * g_color[seg]
    return g_sigma, g_rgb


# ---------------------------------------------------------------- optimizer


def adam_update(params, grads, m, v, shadow, lr, beta1, beta2, eps, step, ema_decay):
    bad = int(np.count_nonzero(~np.isfinite(grads)))
    if bad:
        return bad
    g = grads.astype(np.float64)
    mi = beta1 * m + (1.0 - beta1) * g
    vi = beta2 * v + (1.0 - beta2) * g * g
    m[:] = mi
    v[:] = vi
    p = params - lr * (mi / (1.0 - beta1 ** step)) / (np.sqrt(vi / (1.0 - beta2 ** step)) + eps)
    params[:] = p
    shadow[:] = ema_decay * shadow + (1.0 - ema_decay) * p
    return 0
