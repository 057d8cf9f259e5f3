"""Ray generation, occupancy-accelerated marching in deformed space, and
alpha compositing of canonicalized field samples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .bvh import Bvh, build_bvh
from .encoding import sh_encode
from .errors import PixelOutOfBounds, ShapeMismatch
from .geometry import (
    BETA_ADJACENT,
    BETA_SELF,
    ScalingMode,
    TriangleMesh,
    face_deformation_gradients,
)
from .network import EXPRESSION_DIM, MlpTape

DELTA = math.sqrt(3.0) / 1024.0
TRANSMITTANCE_EPS = 1e-4
GRID_RESOLUTION = 128
OCCUPANCY_THRESHOLD = 0.01
OCCUPANCY_DECAY = 0.95
MARCH_CHUNK = 64


# ---------------------------------------------------------------- cameras


@dataclass
class Camera:
    K: np.ndarray
    pose: np.ndarray  # world-from-camera, 4x4 rigid
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.pose[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def pixel_directions(self, xs, ys) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        pix = np.stack([xs + 0.5, ys + 0.5, np.ones_like(xs)], axis=-1)
        cam = pix @ np.linalg.inv(self.K).T
        d = cam @ self.pose[:3, :3].T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def all_rays(self) -> tuple[np.ndarray, np.ndarray]:
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        d = self.pixel_directions(xs.ravel(), ys.ravel())
        return np.broadcast_to(self.center, d.shape).copy(), np.ascontiguousarray(d)

    def rotated_about_y(self, degrees: float, pivot=(0.0, 0.0, 0.0)) -> "Camera":
        """Orbit the camera about the vertical axis through ``pivot``."""
        a = math.radians(degrees)
        rot = np.array([[math.cos(a), 0.0, math.sin(a)], [0.0, 1.0, 0.0],
                        [-math.sin(a), 0.0, math.cos(a)]])
        pv = np.asarray(pivot, dtype=np.float64)
        pose = self.pose.copy()
        pose[:3, :3] = rot @ self.pose[:3, :3]
        pose[:3, 3] = rot @ (self.pose[:3, 3] - pv) + pv
        return Camera(self.K, pose, self.width, self.height)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


def intersect_box(origins, dirs, box_min, box_max) -> tuple[np.ndarray, np.ndarray]:
    """Slab test; rays that miss get near == far == 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box_min - origins) * inv
        t1 = (box_max - origins) * inv
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    near = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
    far = np.maximum(t0, t1).min(axis=1)
    miss = far <= near
    near[miss] = 0.0
    far[miss] = 0.0
    return near, far


def generate_ray(cam: Camera, pixel, box: tuple | None = None) -> Ray:
    x, y = pixel
    if not (0 <= x < cam.width and 0 <= y < cam.height):
        raise PixelOutOfBounds(f"pixel {pixel} outside {cam.width}x{cam.height} image")
    d = cam.pixel_directions(np.array([x]), np.array([y]))
    o = cam.center[None]
    if box is None:
        return Ray(o[0], d[0], 0.0, math.inf)
    near, far = intersect_box(o, d, np.asarray(box[0]), np.asarray(box[1]))
    return Ray(o[0], d[0], float(near[0]), float(far[0]))


# ---------------------------------------------------------------- occupancy


class OccupancyGrid:
    """Bitfield over the deformed-space box plus a per-cell density EMA.

    Cells are indexed ``(iz * res + iy) * res + ix``.
    """

    def __init__(self, box_min, box_max, resolution: int = GRID_RESOLUTION,
                 threshold: float = OCCUPANCY_THRESHOLD, decay: float = OCCUPANCY_DECAY):
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        self.resolution = int(resolution)
        self.threshold = threshold
        self.decay = decay
        n = self.resolution**3
        # start fully occupied so the first updates see every cell
        self.ema = np.ones(n, dtype=np.float32)
        self.bits = np.ones(n, dtype=np.uint8)

    @property
    def n_cells(self) -> int:
        return self.resolution**3

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.box_max - self.box_min))

    @property
    def step(self) -> float:
        """World-space marching step: DELTA in box-diagonal units."""
        return DELTA * self.diagonal

    def refresh_bits(self) -> None:
        self.bits = (self.ema > self.threshold).astype(np.uint8)

    def set_all(self, value: bool) -> None:
        self.ema[:] = 1.0 if value else 0.0
        self.refresh_bits()

    def seed_from_meshes(self, meshes, dilation: int = 2, lifetime: int = 90) -> None:
        """Start from the cells around the given surfaces; everything else empty.

        Cells touched by a dense surface sampling of each mesh are marked,
        then grown by ``dilation`` cells in every direction. Their EMA starts
        high enough to survive ``lifetime`` decays without reinforcement.
        """
        from scipy.ndimage import binary_dilation

        res = self.resolution
        vol = np.zeros(self.n_cells, dtype=bool)
        cell = float(np.min((self.box_max - self.box_min) / res))
        for mesh in meshes:
            tri = mesh.triangles()
            longest = np.max(np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=2))
            n = max(1, int(np.ceil(2.0 * longest / cell)))
            i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
            keep = i + j <= n
            a, b = i[keep] / n, j[keep] / n
            bary = np.stack([1.0 - a - b, a, b], axis=1)
            pts = np.einsum("sk,fkj->fsj", bary, tri).reshape(-1, 3)
            vol[self.cell_of(pts)] = True
        if dilation > 0:
            vol = binary_dilation(vol.reshape(res, res, res), iterations=dilation).reshape(-1)
        start = self.threshold / self.decay**lifetime
        self.ema[:] = np.where(vol, start, 0.0).astype(np.float32)
        self.refresh_bits()

    def occupied(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def cell_of(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        res = self.resolution
        c = np.floor((p - self.box_min) / (self.box_max - self.box_min) * res).astype(np.int64)
        c = np.clip(c, 0, res - 1)
        return (c[:, 2] * res + c[:, 1]) * res + c[:, 0]

    def cell_points(self, cells, jitter: np.ndarray | None = None) -> np.ndarray:
        res = self.resolution
        cells = np.asarray(cells, dtype=np.int64)
        ijk = np.stack([cells % res, (cells // res) % res, cells // (res * res)], axis=1)
        frac = 0.5 if jitter is None else jitter
        return self.box_min + (ijk + frac) / res * (self.box_max - self.box_min)


# ---------------------------------------------------------------- geometry per frame


class FrameGeometry:
    """Everything needed to canonicalize points of one deformed frame."""

    def __init__(self, mesh_def: TriangleMesh, mesh_canon: TriangleMesh, bvh: Bvh | None = None,
                 scaling_mode: ScalingMode = ScalingMode.GEOMETRIC_SQRT):
        self.mesh_def = mesh_def
        self.mesh_canon = mesh_canon
        self.bvh = bvh if bvh is not None else build_bvh(mesh_def)
        self.grads = np.ascontiguousarray(face_deformation_gradients(mesh_def, mesh_canon, scaling_mode))
        self.centroids = np.ascontiguousarray(mesh_def.centroids())


class GeometryStack:
    """Per-frame BVHs and face maps padded into dense arrays for one kernel call."""

    def __init__(self, frames: list[FrameGeometry]):
        if not frames:
            raise ValueError("empty geometry stack")
        self.frames = frames
        k = len(frames)
        n_faces = frames[0].mesh_def.n_faces
        m = max(f.bvh.n_nodes for f in frames)
        self.node_min = np.zeros((k, m, 3))
        self.node_max = np.zeros((k, m, 3))
        self.left = np.full((k, m), -1, dtype=np.int32)
        self.right = np.full((k, m), -1, dtype=np.int32)
        self.start = np.zeros((k, m), dtype=np.int32)
        self.count = np.zeros((k, m), dtype=np.int32)
        self.order = np.zeros((k, n_faces), dtype=np.int32)
        self.tri = np.zeros((k, n_faces, 3, 3))
        self.grads = np.zeros((k, n_faces, 3, 4))
        self.centroids = np.zeros((k, n_faces, 3))
        for i, f in enumerate(frames):
            b = f.bvh
            nn = b.n_nodes
            self.node_min[i, :nn] = b.node_min
            self.node_max[i, :nn] = b.node_max
            self.left[i, :nn] = b.left
            self.right[i, :nn] = b.right
            self.start[i, :nn] = b.start
            self.count[i, :nn] = b.count
            self.order[i] = b.order
            self.tri[i] = b.tri
            self.grads[i] = f.grads
            self.centroids[i] = f.centroids
        self.adjacency = np.ascontiguousarray(frames[0].mesh_def.adjacency, dtype=np.int32)

    def canonicalize(self, points, slots) -> tuple[np.ndarray, np.ndarray]:
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        ids = np.ascontiguousarray(slots, dtype=np.int32)
        return kernels.canonicalize_points(
            pts, ids, self.node_min, self.node_max, self.left, self.right, self.start,
            self.count, self.order, self.tri, self.grads, self.centroids, self.adjacency,
            BETA_ADJACENT, BETA_SELF,
        )


# ---------------------------------------------------------------- samples


@dataclass
class RaySampleBatch:
    """Samples of one or more rays, grouped per ray in increasing t."""

    offsets: np.ndarray  # (R + 1,)
    t: np.ndarray
    points: np.ndarray
    canon: np.ndarray
    faces: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    state: dict | None = None
    delta: float = DELTA

    @property
    def n_rays(self) -> int:
        return len(self.offsets) - 1

    def __len__(self) -> int:
        return len(self.t)

    def ray_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rays), np.diff(self.offsets))


def concat_states(states: list[dict]) -> dict:
    out = {}
    for key in states[0]:
        vals = [s[key] for s in states]
        if isinstance(vals[0], MlpTape):
            acts = [np.concatenate([v.acts[i] for v in vals]) for i in range(len(vals[0].acts))]
            out[key] = MlpTape(vals[0].owner, acts, np.concatenate([v.out for v in vals]))
        else:
            out[key] = np.concatenate(vals)
    return out


def take_state(state: dict, idx) -> dict:
    return {k: (v.take(idx) if isinstance(v, MlpTape) else v[idx]) for k, v in state.items()}


@dataclass
class MarchContext:
    """Per-render constants shared by every ray of a batch."""

    geometry: GeometryStack
    expressions: np.ndarray  # (slots, 16)
    mouth_faces: np.ndarray  # (F,) bool
    grid: OccupancyGrid


def sample_expressions(ctx: MarchContext, slots, faces, global_conditioning: bool) -> np.ndarray:
    """Expression code E_i inside the mouth region, the all-ones code elsewhere."""
    expr = ctx.expressions[slots]
    if global_conditioning:
        return expr
    local = ctx.mouth_faces[faces]
    return np.where(local[:, None], expr, 1.0)


def march_rays(origins, dirs, near, far, slots, ctx: MarchContext, field,
               chunk: int = MARCH_CHUNK, with_color: bool = True) -> RaySampleBatch:
    """Fixed-step march through occupied cells with early termination.

    Samples are produced ``chunk`` steps per ray at a time; densities are
    evaluated per chunk so rays stop once transmittance drops below
    ``TRANSMITTANCE_EPS``. Colors are evaluated only for kept samples.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    slots = np.asarray(slots, dtype=np.int32)
    grid = ctx.grid
    n_rays = len(origins)
    step = grid.step
    t_cur = np.asarray(near, dtype=np.float64) + 0.5 * step
    t_far = np.ascontiguousarray(far, dtype=np.float64)
    trans = np.ones(n_rays)
    global_cond = getattr(field, "global_conditioning", False)
    active = np.flatnonzero(t_cur < t_far)
    pieces = []
    while len(active):
        tc = np.ascontiguousarray(t_cur[active])
        counts, t_out = kernels.march_occupied(
            origins[active], dirs[active], tc, t_far[active], step, grid.bits,
            grid.box_min, grid.box_max, grid.resolution, chunk,
        )
        t_cur[active] = tc
        total = int(counts.sum())
        if total:
            ray_ids = np.repeat(active, counts)
            ts = t_out[np.arange(chunk)[None, :] < counts[:, None]]
            pts = origins[ray_ids] + ts[:, None] * dirs[ray_ids]
            canon, faces = ctx.geometry.canonicalize(pts, slots[ray_ids])
            expr = sample_expressions(ctx, slots[ray_ids], faces, global_cond)
            sigma, state = field.density(canon, expr)
            offs = np.zeros(len(active) + 1, dtype=np.int64)
            np.cumsum(counts, out=offs[1:])
            tr = np.ascontiguousarray(trans[active])
            kept = kernels.accumulate_transmittance(sigma, offs, DELTA, tr, TRANSMITTANCE_EPS)
            trans[active] = tr
            rank = np.arange(total) - offs[:-1].repeat(counts)
            keep = np.flatnonzero(rank < np.repeat(kept, counts))
            pieces.append((ray_ids[keep], ts[keep], pts[keep], canon[keep], faces[keep],
                           sigma[keep], take_state(state, keep)))
        still = (t_cur[active] < t_far[active]) & (trans[active] >= TRANSMITTANCE_EPS)
        active = active[still]

    if not pieces:
        empty = np.zeros(0)
        return RaySampleBatch(np.zeros(n_rays + 1, dtype=np.int64), empty, np.zeros((0, 3)),
                              np.zeros((0, 3)), np.zeros(0, dtype=np.int32), empty,
                              np.zeros((0, 3)), None)
    ray_ids = np.concatenate([p[0] for p in pieces])
    order = np.argsort(ray_ids, kind="stable")
    ray_ids = ray_ids[order]
    t = np.concatenate([p[1] for p in pieces])[order]
    pts = np.concatenate([p[2] for p in pieces])[order]
    canon = np.concatenate([p[3] for p in pieces])[order]
    faces = np.concatenate([p[4] for p in pieces])[order]
    sigma = np.ascontiguousarray(np.concatenate([p[5] for p in pieces])[order])
    state = take_state(concat_states([p[6] for p in pieces]), order)
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(np.bincount(ray_ids, minlength=n_rays), out=offsets[1:])
    rgb = np.zeros((len(t), 3))
    if with_color and len(t):
        sh = sh_encode(dirs)[ray_ids]
        rgb, state = field.color(state, sh)
    return RaySampleBatch(offsets, np.ascontiguousarray(t), pts, canon, faces, sigma,
                          np.ascontiguousarray(rgb, dtype=np.float64), state)


def march_ray(ray: Ray, grid: OccupancyGrid, bvh: Bvh, mesh_def: TriangleMesh,
              mesh_canon: TriangleMesh, field, expression, mouth_region) -> RaySampleBatch:
    """Single-ray convenience wrapper around :func:`march_rays`."""
    geo = GeometryStack([FrameGeometry(mesh_def, mesh_canon, bvh)])
    mouth = np.zeros(mesh_def.n_faces, dtype=bool)
    mouth[np.asarray(list(mouth_region), dtype=np.int64)] = True
    ctx = MarchContext(geo, np.asarray(expression, dtype=np.float64).reshape(1, EXPRESSION_DIM),
                       mouth, grid)
    return march_rays(ray.origin[None], ray.direction[None], np.array([ray.near]),
                      np.array([ray.far]), np.zeros(1, dtype=np.int32), ctx, field)


# ---------------------------------------------------------------- compositing


@dataclass
class CompositeResult:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    t_final: np.ndarray
    used: np.ndarray
    t_before: np.ndarray


def composite(batch: RaySampleBatch, background) -> CompositeResult:
    seg = batch.ray_index()
    if len(batch) > 1:
        same = seg[1:] == seg[:-1]
        if np.any(batch.t[1:][same] <= batch.t[:-1][same]):
            raise ValueError("samples must be strictly increasing in t within each ray")
    bg = np.ascontiguousarray(background, dtype=np.float64)
    if bg.shape != (3,):
        raise ShapeMismatch("background must be an RGB triple")
    out = kernels.composite_forward(
        np.ascontiguousarray(batch.sigma, dtype=np.float64),
        np.ascontiguousarray(batch.rgb, dtype=np.float64),
        np.ascontiguousarray(batch.t, dtype=np.float64),
        np.ascontiguousarray(batch.offsets, dtype=np.int64), batch.delta, bg, TRANSMITTANCE_EPS,
    )
    return CompositeResult(*out)


def composite_backward(batch: RaySampleBatch, result: CompositeResult, background,
                       g_color, g_depth, g_opacity) -> tuple[np.ndarray, np.ndarray]:
    """dL/d(sigma) and dL/d(rgb) per sample given gradients of the ray outputs."""
    n = batch.n_rays
    return kernels.composite_backward(
        np.ascontiguousarray(batch.sigma, dtype=np.float64),
        np.ascontiguousarray(batch.rgb, dtype=np.float64),
        np.ascontiguousarray(batch.t, dtype=np.float64),
        np.ascontiguousarray(batch.offsets, dtype=np.int64), batch.delta,
        np.ascontiguousarray(background, dtype=np.float64), result.t_final, result.used,
        result.t_before,
        np.ascontiguousarray(np.broadcast_to(g_color, (n, 3)), dtype=np.float64),
        np.ascontiguousarray(np.broadcast_to(g_depth, (n,)), dtype=np.float64),
        np.ascontiguousarray(np.broadcast_to(g_opacity, (n,)), dtype=np.float64),
    )


# ---------------------------------------------------------------- images


@dataclass
class RenderedImage:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    opacity: np.ndarray  # (H, W)


def render_rays(origins, dirs, slots, ctx: MarchContext, field, background,
                batch_rays: int = 4096) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(origins)
    color = np.empty((n, 3))
    depth = np.empty(n)
    opacity = np.empty(n)
    near, far = intersect_box(origins, dirs, ctx.grid.box_min, ctx.grid.box_max)
    for s in range(0, n, batch_rays):
        e = min(n, s + batch_rays)
        batch = march_rays(origins[s:e], dirs[s:e], near[s:e], far[s:e], slots[s:e], ctx, field)
        res = composite(batch, background)
        color[s:e] = res.color
        depth[s:e] = res.depth
        opacity[s:e] = res.opacity
    return color, depth, opacity


def render_image(frame, field, grid: OccupancyGrid, background, camera: Camera | None = None,
                 batch_rays: int = 4096) -> RenderedImage:
    """Render every pixel of ``frame`` (optionally from another camera)."""
    cam = camera if camera is not None else frame.camera
    geo = GeometryStack([frame.geometry()])
    ctx = MarchContext(geo, frame.expression.reshape(1, EXPRESSION_DIM), frame.mouth_faces, grid)
    o, d = cam.all_rays()
    color, depth, opacity = render_rays(o, d, np.zeros(len(o), dtype=np.int32), ctx, field,
                                        background, batch_rays)
    h, w = cam.height, cam.width
    return RenderedImage(color.reshape(h, w, 3), depth.reshape(h, w), opacity.reshape(h, w))


# ---------------------------------------------------------------- occupancy updates


def update_occupancy(grid: OccupancyGrid, field, ctx: MarchContext, rng: np.random.Generator,
                     sample_count: int, occupied_count: int | None = None,
                     shell_width: float | None = None, chunk: int = 1 << 16) -> None:
    """Decay every cell's density EMA, then probe a subset of cells.

    Probed cells are ``sample_count`` uniformly drawn cells plus
    ``occupied_count`` cells drawn from the currently occupied set (all of
    them when ``occupied_count`` is None). Each probe evaluates the density
    at a jittered point, canonicalized through a randomly chosen frame of
    ``ctx``. With ``shell_width`` set, cells whose probe lies within that
    distance of the deformed mesh are forced on.
    """
    n_slots = len(ctx.geometry.frames)
    uniform = rng.integers(0, grid.n_cells, size=sample_count)
    occ = grid.occupied()
    if occupied_count is None:
        extra = occ
    elif len(occ):
        extra = occ[rng.integers(0, len(occ), size=occupied_count)]
    else:
        extra = occ
    cells = np.concatenate([uniform, extra])
    jitter = rng.uniform(0.0, 1.0, (len(cells), 3))
    slots = rng.integers(0, n_slots, size=len(cells)).astype(np.int32)
    global_cond = getattr(field, "global_conditioning", False)
    dens = np.empty(len(cells))
    near_surface = np.zeros(len(cells), dtype=bool)
    for s in range(0, len(cells), chunk):
        e = min(len(cells), s + chunk)
        pts = grid.cell_points(cells[s:e], jitter[s:e])
        canon, faces = ctx.geometry.canonicalize(pts, slots[s:e])
        expr = sample_expressions(ctx, slots[s:e], faces, global_cond)
        dens[s:e], _ = field.density(canon, expr)
        if shell_width is not None:
            for k in np.unique(slots[s:e]):
                sel = np.flatnonzero(slots[s:e] == k)
                _, dist, _ = ctx.geometry.frames[k].bvh.query(pts[sel])
                near_surface[s + sel] = dist <= shell_width
    grid.ema *= np.float32(grid.decay)
    np.maximum.at(grid.ema, cells, dens.astype(np.float32))
    if shell_width is not None:
        forced = cells[near_surface]
        floor = np.float32(grid.threshold / grid.decay)
        grid.ema[forced] = np.maximum(grid.ema[forced], floor)
    grid.refresh_bits()
