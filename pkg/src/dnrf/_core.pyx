# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the hot loops.

Every function here has a numpy twin with the same signature in
:mod:`dnrf._fallback`; :mod:`dnrf._backend` picks one at import time.
Array arguments are C-contiguous. Output arrays are preallocated by the
caller unless a function returns them.
"""

import numpy as np

from cython cimport floating
from cython.parallel cimport prange
from libc.math cimport exp, floor, sqrt, isfinite
from libc.stdint cimport int32_t, int64_t, uint8_t, uint32_t

cdef extern from *:
    """
    #ifdef _OPENMP
    #include <omp.h>
    #define DNRF_HAVE_OPENMP 1
    #else
    #define DNRF_HAVE_OPENMP 0
    static int omp_get_max_threads(void) { return 1; }
    #endif
    """
    int DNRF_HAVE_OPENMP
    int omp_get_max_threads() nogil

NAME = "compiled"
HAVE_OPENMP = bool(DNRF_HAVE_OPENMP)

cdef uint32_t PRIME_Y = 2654435761u
cdef uint32_t PRIME_Z = 805459861u
cdef enum:
    STACK_SIZE = 256

cdef int _num_threads = 1


def set_num_threads(int n):
    global _num_threads
    _num_threads = max(1, n)


def get_num_threads():
    return _num_threads


# ---------------------------------------------------------------- geometry

cdef inline double _closest_on_triangle(
    double px, double py, double pz,
    const double* a, const double* b, const double* c,
    double* out,
) noexcept nogil:
    """Closest point on a closed triangle; returns the squared distance."""
    cdef double abx = b[0] - a[0], aby = b[1] - a[1], abz = b[2] - a[2]
    cdef double acx = c[0] - a[0], acy = c[1] - a[1], acz = c[2] - a[2]
    cdef double apx = px - a[0], apy = py - a[1], apz = pz - a[2]
    cdef double d1 = abx * apx + aby * apy + abz * apz
    cdef double d2 = acx * apx + acy * apy + acz * apz
    cdef double bpx, bpy, bpz, cpx, cpy, cpz, d3, d4, d5, d6, va, vb, vc, v, w, denom
    cdef double qx, qy, qz
    if d1 <= 0.0 and d2 <= 0.0:
        qx = a[0]; qy = a[1]; qz = a[2]
    else:
        bpx = px - b[0]; bpy = py - b[1]; bpz = pz - b[2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        vc = d1 * d4 - d3 * d2
        if d3 >= 0.0 and d4 <= d3:
            qx = b[0]; qy = b[1]; qz = b[2]
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            v = d1 / (d1 - d3)
            qx = a[0] + v * abx; qy = a[1] + v * aby; qz = a[2] + v * abz
        else:
            cpx = px - c[0]; cpy = py - c[1]; cpz = pz - c[2]
            d5 = abx * cpx + aby * cpy + abz * cpz
            d6 = acx * cpx + acy * cpy + acz * cpz
            vb = d5 * d2 - d1 * d6
            va = d3 * d6 - d5 * d4
            if d6 >= 0.0 and d5 <= d6:
                qx = c[0]; qy = c[1]; qz = c[2]
            elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                w = d2 / (d2 - d6)
                qx = a[0] + w * acx; qy = a[1] + w * acy; qz = a[2] + w * acz
            elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                qx = b[0] + w * (c[0] - b[0])
                qy = b[1] + w * (c[1] - b[1])
                qz = b[2] + w * (c[2] - b[2])
            else:
                denom = 1.0 / (va + vb + vc)
                v = vb * denom
                w = vc * denom
                qx = a[0] + abx * v + acx * w
                qy = a[1] + aby * v + acy * w
                qz = a[2] + abz * v + acz * w
    out[0] = qx; out[1] = qy; out[2] = qz
    return (px - qx) * (px - qx) + (py - qy) * (py - qy) + (pz - qz) * (pz - qz)


cdef inline double _aabb_dist2(double px, double py, double pz,
                               const double* lo, const double* hi) noexcept nogil:
    cdef double d = 0.0, e
    e = lo[0] - px
    if e > 0.0:
        d += e * e
    else:
        e = px - hi[0]
        if e > 0.0:
            d += e * e
    e = lo[1] - py
    if e > 0.0:
        d += e * e
    else:
        e = py - hi[1]
        if e > 0.0:
            d += e * e
    e = lo[2] - pz
    if e > 0.0:
        d += e * e
    else:
        e = pz - hi[2]
        if e > 0.0:
            d += e * e
    return d


cdef inline int32_t _bvh_query(
    double px, double py, double pz,
    const double* node_min, const double* node_max,
    const int32_t* left, const int32_t* right,
    const int32_t* start, const int32_t* count,
    const int32_t* order, const double* tri,
    double* best_d2_out, double* best_q,
) noexcept nogil:
    cdef int32_t stack[STACK_SIZE]
    cdef int sp = 0
    cdef int32_t node, l, r, k, f, best_f = -1
    cdef double best = 1e300, d2, dl, dr
    cdef double q[3]
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _aabb_dist2(px, py, pz, node_min + 3 * node, node_max + 3 * node) > best:
            continue
        l = left[node]
        if l < 0:
            for k in range(start[node], start[node] + count[node]):
                f = order[k]
                d2 = _closest_on_triangle(px, py, pz, tri + 9 * f, tri + 9 * f + 3,
                                          tri + 9 * f + 6, q)
                if d2 < best or (d2 == best and f < best_f):
                    best = d2
                    best_f = f
                    best_q[0] = q[0]; best_q[1] = q[1]; best_q[2] = q[2]
        else:
            r = right[node]
            dl = _aabb_dist2(px, py, pz, node_min + 3 * l, node_max + 3 * l)
            dr = _aabb_dist2(px, py, pz, node_min + 3 * r, node_max + 3 * r)
            # push the farther child first so the nearer one is popped next
            if dl <= dr:
                if dr <= best:
                    stack[sp] = r; sp += 1
                if dl <= best:
                    stack[sp] = l; sp += 1
            else:
                if dl <= best:
                    stack[sp] = l; sp += 1
                if dr <= best:
                    stack[sp] = r; sp += 1
    best_d2_out[0] = best
    return best_f


cdef inline int32_t _bvh_query_out(
    const double* p,
    const double* node_min, const double* node_max,
    const int32_t* left, const int32_t* right,
    const int32_t* start, const int32_t* count,
    const int32_t* order, const double* tri,
    double* dist_out, double* closest_out,
) noexcept nogil:
    cdef double d2
    cdef int32_t f = _bvh_query(p[0], p[1], p[2], node_min, node_max, left, right,
                                start, count, order, tri, &d2, closest_out)
    dist_out[0] = sqrt(d2)
    return f


cdef inline int32_t _canonicalize_one(
    const double* p, int32_t k,
    const double* node_min, const double* node_max,
    const int32_t* left, const int32_t* right,
    const int32_t* start, const int32_t* count,
    const int32_t* order, const double* tri,
    const double* grads, const double* centroids,
    const int32_t* adjacency, int n_adj,
    double beta_adjacent, double beta_self, double* out,
) noexcept nogil:
    # all per-frame pointers are already offset to frame k
    cdef double d2, w, wsum = 0.0, dx, dy, dz
    cdef double acc[12]
    cdef double q[3]
    cdef int32_t f, g
    cdef int j, a
    f = _bvh_query(p[0], p[1], p[2], node_min, node_max, left, right, start, count,
                   order, tri, &d2, q)
    for a in range(12):
        acc[a] = 0.0
    for j in range(-1, n_adj):
        if j < 0:
            g = f
        else:
            g = adjacency[f * n_adj + j]
            if g < 0:
                continue
        dx = centroids[3 * g] - p[0]
        dy = centroids[3 * g + 1] - p[1]
        dz = centroids[3 * g + 2] - p[2]
        if j < 0:
            w = exp(-beta_self * sqrt(dx * dx + dy * dy + dz * dz))
        else:
            w = exp(-beta_adjacent * sqrt(dx * dx + dy * dy + dz * dz))
        wsum += w
        for a in range(12):
            acc[a] += w * grads[12 * g + a]
    for a in range(3):
        out[a] = (acc[4 * a] * p[0] + acc[4 * a + 1] * p[1] + acc[4 * a + 2] * p[2]
                  + acc[4 * a + 3]) / wsum
    return f


def closest_points_on_triangles(const double[:, ::1] points, const double[:, :, ::1] tris):
    """Pairwise closest points: point i against triangle i."""
    cdef Py_ssize_t n = points.shape[0], i
    dist = np.empty(n, dtype=np.float64)
    closest = np.empty((n, 3), dtype=np.float64)
    cdef double[::1] dv = dist
    cdef double[:, ::1] cv = closest
    cdef double q[3]
    cdef double d2
    with nogil:
        for i in range(n):
            d2 = _closest_on_triangle(points[i, 0], points[i, 1], points[i, 2],
                                      &tris[i, 0, 0], &tris[i, 1, 0], &tris[i, 2, 0], q)
            dv[i] = sqrt(d2)
            cv[i, 0] = q[0]; cv[i, 1] = q[1]; cv[i, 2] = q[2]
    return dist, closest


def bvh_nearest(
    const double[:, ::1] points,
    const double[:, ::1] node_min, const double[:, ::1] node_max,
    const int32_t[::1] left, const int32_t[::1] right,
    const int32_t[::1] start, const int32_t[::1] count,
    const int32_t[::1] order, const double[:, :, ::1] tri,
):
    """Nearest triangle for each point by branch-and-bound descent."""
    cdef Py_ssize_t n = points.shape[0], i
    faces = np.empty(n, dtype=np.int32)
    dist = np.empty(n, dtype=np.float64)
    closest = np.empty((n, 3), dtype=np.float64)
    cdef int32_t[::1] fv = faces
    cdef double[::1] dv = dist
    cdef double[:, ::1] cv = closest
    cdef int nt = _num_threads
    for i in prange(n, nogil=True, num_threads=nt, schedule="static"):
        fv[i] = _bvh_query_out(&points[i, 0], &node_min[0, 0], &node_max[0, 0], &left[0],
                               &right[0], &start[0], &count[0], &order[0], &tri[0, 0, 0],
                               &dv[i], &cv[i, 0])
    return faces, dist, closest


def canonicalize_points(
    const double[:, ::1] points,
    const int32_t[::1] frame_ids,
    const double[:, :, ::1] node_min, const double[:, :, ::1] node_max,
    const int32_t[:, ::1] left, const int32_t[:, ::1] right,
    const int32_t[:, ::1] start, const int32_t[:, ::1] count,
    const int32_t[:, ::1] order, const double[:, :, :, ::1] tri,
    const double[:, :, :, ::1] grads, const double[:, :, ::1] centroids,
    const int32_t[:, ::1] adjacency,
    double beta_adjacent, double beta_self,
):
    """Deformed -> canonical map for points drawn from several frames at once.

    Per point: nearest deformed triangle, exponentially weighted blend of the
    3x4 affine blocks of that face and its edge neighbours, then the affine
    image of the point.
    """
    cdef Py_ssize_t n = points.shape[0], i
    cdef int n_adj = adjacency.shape[1]
    canon = np.empty((n, 3), dtype=np.float64)
    faces = np.empty(n, dtype=np.int32)
    cdef double[:, ::1] out = canon
    cdef int32_t[::1] fv = faces
    cdef int nt = _num_threads
    cdef int32_t k
    for i in prange(n, nogil=True, num_threads=nt, schedule="static"):
        k = frame_ids[i]
        fv[i] = _canonicalize_one(
            &points[i, 0], k, &node_min[k, 0, 0], &node_max[k, 0, 0],
            &left[k, 0], &right[k, 0], &start[k, 0], &count[k, 0],
            &order[k, 0], &tri[k, 0, 0, 0], &grads[k, 0, 0, 0], &centroids[k, 0, 0],
            &adjacency[0, 0], n_adj, beta_adjacent, beta_self, &out[i, 0])
    return canon, faces


# ---------------------------------------------------------------- hash grid

cdef inline int64_t _corner_index(int64_t x, int64_t y, int64_t z, int64_t n,
                                  int64_t table_size, bint dense) noexcept nogil:
    if dense:
        return x + (n + 1) * (y + (n + 1) * z)
    return <int64_t>((<uint32_t>x) ^ ((<uint32_t>y) * PRIME_Y) ^ ((<uint32_t>z) * PRIME_Z)) & (table_size - 1)


def hash_encode_forward(
    const double[:, ::1] x_unit,
    const floating[:, :, ::1] tables,
    const int64_t[::1] resolutions,
    floating[:, ::1] out,
):
    """Trilinear multi-level lookup. ``x_unit`` lies in [0, 1]^3."""
    cdef Py_ssize_t n = x_unit.shape[0], i
    cdef int n_levels = tables.shape[0], n_feat = tables.shape[2]
    cdef int64_t table_size = tables.shape[1]
    cdef int nt = _num_threads
    cdef int lvl, c, j
    cdef int64_t res, ix, iy, iz, idx
    cdef double fx, fy, fz, w, pos
    cdef bint dense
    for i in prange(n, nogil=True, num_threads=nt, schedule="static"):
        for lvl in range(n_levels):
            res = resolutions[lvl]
            dense = (res + 1) * (res + 1) * (res + 1) <= table_size
            pos = x_unit[i, 0] * res
            ix = <int64_t>floor(pos)
            if ix > res - 1:
                ix = res - 1
            if ix < 0:
                ix = 0
            fx = pos - ix
            pos = x_unit[i, 1] * res
            iy = <int64_t>floor(pos)
            if iy > res - 1:
                iy = res - 1
            if iy < 0:
                iy = 0
            fy = pos - iy
            pos = x_unit[i, 2] * res
            iz = <int64_t>floor(pos)
            if iz > res - 1:
                iz = res - 1
            if iz < 0:
                iz = 0
            fz = pos - iz
            for j in range(n_feat):
                out[i, lvl * n_feat + j] = 0
            for c in range(8):
                w = 1.0
                if c & 1:
                    w = w * fx
                else:
                    w = w * (1.0 - fx)
                if c & 2:
                    w = w * fy
                else:
                    w = w * (1.0 - fy)
                if c & 4:
                    w = w * fz
                else:
                    w = w * (1.0 - fz)
                idx = _corner_index(ix + (c & 1), iy + ((c >> 1) & 1), iz + ((c >> 2) & 1),
                                    res, table_size, dense)
                for j in range(n_feat):
                    out[i, lvl * n_feat + j] += <floating>(w * tables[lvl, idx, j])


def hash_encode_backward(
    const double[:, ::1] x_unit,
    const floating[:, ::1] grad_out,
    const int64_t[::1] resolutions,
    floating[:, :, ::1] grad_tables,
):
    """Scatter-add of ``grad_out`` into ``grad_tables`` (serial, deterministic)."""
    cdef Py_ssize_t n = x_unit.shape[0], i
    cdef int n_levels = grad_tables.shape[0], n_feat = grad_tables.shape[2]
    cdef int64_t table_size = grad_tables.shape[1]
    cdef int lvl, c, j
    cdef int64_t res, ix, iy, iz, idx
    cdef double fx, fy, fz, w, pos
    cdef bint dense
    with nogil:
        for i in range(n):
            for lvl in range(n_levels):
                res = resolutions[lvl]
                dense = (res + 1) * (res + 1) * (res + 1) <= table_size
                pos = x_unit[i, 0] * res
                ix = <int64_t>floor(pos)
                if ix > res - 1:
                    ix = res - 1
                if ix < 0:
                    ix = 0
                fx = pos - ix
                pos = x_unit[i, 1] * res
                iy = <int64_t>floor(pos)
                if iy > res - 1:
                    iy = res - 1
                if iy < 0:
                    iy = 0
                fy = pos - iy
                pos = x_unit[i, 2] * res
                iz = <int64_t>floor(pos)
                if iz > res - 1:
                    iz = res - 1
                if iz < 0:
                    iz = 0
                fz = pos - iz
                for c in range(8):
                    w = (fx if c & 1 else 1.0 - fx)
                    w = w * (fy if c & 2 else 1.0 - fy)
                    w = w * (fz if c & 4 else 1.0 - fz)
                    idx = _corner_index(ix + (c & 1), iy + ((c >> 1) & 1), iz + ((c >> 2) & 1),
                                        res, table_size, dense)
                    for j in range(n_feat):
                        grad_tables[lvl, idx, j] += <floating>(w * grad_out[i, lvl * n_feat + j])


# ---------------------------------------------------------------- marching

def march_occupied(
    const double[:, ::1] origins, const double[:, ::1] dirs,
    double[::1] t_cur, const double[::1] t_far,
    double step, const uint8_t[::1] bits,
    const double[::1] box_min, const double[::1] box_max, int res,
    int max_per_ray,
):
    """Advance each ray by fixed steps, keeping samples in occupied cells.

    ``t_cur`` is updated in place to the next unvisited position. Returns the
    kept sample count per ray and a (rays, max_per_ray) array of positions.
    """
    cdef Py_ssize_t n = origins.shape[0], r
    counts = np.zeros(n, dtype=np.int32)
    t_out = np.empty((n, max_per_ray), dtype=np.float64)
    cdef int32_t[::1] cv = counts
    cdef double[:, ::1] tv = t_out
    cdef double t, far, px, py, pz
    cdef double sx = res / (box_max[0] - box_min[0])
    cdef double sy = res / (box_max[1] - box_min[1])
    cdef double sz = res / (box_max[2] - box_min[2])
    cdef int64_t ix, iy, iz
    cdef int kept
    with nogil:
        for r in range(n):
            t = t_cur[r]
            far = t_far[r]
            kept = 0
            while t < far and kept < max_per_ray:
                px = origins[r, 0] + t * dirs[r, 0]
                py = origins[r, 1] + t * dirs[r, 1]
                pz = origins[r, 2] + t * dirs[r, 2]
                ix = <int64_t>floor((px - box_min[0]) * sx)
                iy = <int64_t>floor((py - box_min[1]) * sy)
                iz = <int64_t>floor((pz - box_min[2]) * sz)
                if ix < 0:
                    ix = 0
                elif ix >= res:
                    ix = res - 1
                if iy < 0:
                    iy = 0
                elif iy >= res:
                    iy = res - 1
                if iz < 0:
                    iz = 0
                elif iz >= res:
                    iz = res - 1
                if bits[(iz * res + iy) * res + ix]:
                    tv[r, kept] = t
                    kept += 1
                t += step
            t_cur[r] = t
            cv[r] = kept
    return counts, t_out


def accumulate_transmittance(
    const double[::1] sigma, const int64_t[::1] offsets, double delta,
    double[::1] trans, double threshold,
):
    """Running transmittance across chunks; returns samples kept per ray."""
    cdef Py_ssize_t n = offsets.shape[0] - 1, r, s
    kept = np.zeros(n, dtype=np.int64)
    cdef int64_t[::1] kv = kept
    cdef double t
    with nogil:
        for r in range(n):
            t = trans[r]
            for s in range(offsets[r], offsets[r + 1]):
                if t < threshold:
                    break
                t = t * exp(-sigma[s] * delta)
                kv[r] += 1
            trans[r] = t
    return kept


def composite_forward(
    const double[::1] sigma, const double[:, ::1] rgb, const double[::1] t,
    const int64_t[::1] offsets, double delta, const double[::1] background,
    double threshold,
):
    """Front-to-back alpha compositing with early termination.

    Returns color (R,3), depth (R,), opacity (R,), final transmittance (R,),
    samples used per ray (R,) and per-sample transmittance before the sample.
    """
    cdef Py_ssize_t n = offsets.shape[0] - 1, r, s
    cdef Py_ssize_t m = sigma.shape[0]
    color = np.zeros((n, 3), dtype=np.float64)
    depth = np.zeros(n, dtype=np.float64)
    opacity = np.zeros(n, dtype=np.float64)
    t_final = np.ones(n, dtype=np.float64)
    used = np.zeros(n, dtype=np.int64)
    t_before = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] cv = color
    cdef double[::1] dv = depth, ov = opacity, fv = t_final, tb = t_before
    cdef int64_t[::1] uv = used
    cdef double T, a, w
    with nogil:
        for r in range(n):
            T = 1.0
            for s in range(offsets[r], offsets[r + 1]):
                if T < threshold:
                    break
                a = 1.0 - exp(-sigma[s] * delta)
                w = T * a
                tb[s] = T
                cv[r, 0] += w * rgb[s, 0]
                cv[r, 1] += w * rgb[s, 1]
                cv[r, 2] += w * rgb[s, 2]
                dv[r] += w * t[s]
                ov[r] += w
                T = T * exp(-sigma[s] * delta)
                uv[r] += 1
            fv[r] = T
            cv[r, 0] += T * background[0]
            cv[r, 1] += T * background[1]
            cv[r, 2] += T * background[2]
    return color, depth, opacity, t_final, used, t_before


def composite_backward(
    const double[::1] sigma, const double[:, ::1] rgb, const double[::1] t,
    const int64_t[::1] offsets, double delta, const double[::1] background,
    const double[::1] t_final, const int64_t[::1] used, const double[::1] t_before,
    const double[:, ::1] g_color, const double[::1] g_depth, const double[::1] g_opacity,
):
    """Gradients of the composited outputs w.r.t. per-sample density and color."""
    cdef Py_ssize_t n = offsets.shape[0] - 1, r, s
    cdef Py_ssize_t m = sigma.shape[0]
    g_sigma = np.zeros(m, dtype=np.float64)
    g_rgb = np.zeros((m, 3), dtype=np.float64)
    cdef double[::1] gs = g_sigma
    cdef double[:, ::1] gr = g_rgb
    cdef double suffix, tail, T_after, w, val, a
    cdef int64_t s0, s1
    with nogil:
        for r in range(n):
            s0 = offsets[r]
            s1 = s0 + used[r]
            suffix = 0.0
            tail = t_final[r] * (g_color[r, 0] * background[0] + g_color[r, 1] * background[1]
                                 + g_color[r, 2] * background[2])
            s = s1 - 1
            while s >= s0:
                a = 1.0 - exp(-sigma[s] * delta)
                w = t_before[s] * a
                T_after = t_before[s] * exp(-sigma[s] * delta)
                val = (g_color[r, 0] * rgb[s, 0] + g_color[r, 1] * rgb[s, 1]
                       + g_color[r, 2] * rgb[s, 2] + g_depth[r] * t[s] + g_opacity[r])
                gs[s] = delta * (T_after * val - suffix - tail)
                gr[s, 0] = w * g_color[r, 0]
                gr[s, 1] = w * g_color[r, 1]
                gr[s, 2] = w * g_color[r, 2]
                suffix += w * val
                s -= 1
    return g_sigma, g_rgb


# ---------------------------------------------------------------- optimizer

def adam_update(
    float[::1] params, const float[::1] grads, float[::1] m, float[::1] v,
    float[::1] shadow, double lr, double beta1, double beta2, double eps,
    long step, double ema_decay,
):
    """One bias-corrected Adam step followed by the EMA shadow update.

    Returns the number of non-finite gradient entries; parameters are left
    untouched when it is nonzero.
    """
    cdef Py_ssize_t n = params.shape[0], i
    cdef Py_ssize_t bad = 0
    cdef double c1 = 1.0 - beta1 ** step
    cdef double c2 = 1.0 - beta2 ** step
    cdef double g, mi, vi, p
    with nogil:
        for i in range(n):
            if not isfinite(grads[i]):
                bad += 1
        if bad == 0:
            for i in range(n):
                g = grads[i]
                mi = beta1 * m[i] + (1.0 - beta1) * g
                vi = beta2 * v[i] + (1.0 - beta2) * g * g
                m[i] = <float>mi
                v[i] = <float>vi
                p = params[i] - lr * (mi / c1) / (sqrt(vi / c2) + eps)
                params[i] = <float>p
                shadow[i] = <float>(ema_decay * shadow[i] + (1.0 - ema_decay) * p)
    return bad
