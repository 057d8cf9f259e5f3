"""Losses, the optimization loop, image metrics and expression transfer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from .encoding import HashGridConfig
from .errors import LengthMismatch, NonFiniteLoss
from .geometry import TriangleMesh
from .network import EXPRESSION_DIM, AdamState, RadianceField, adam_step
from .renderer import (
    DELTA,
    Camera,
    FrameGeometry,
    GeometryStack,
    MarchContext,
    OccupancyGrid,
    composite,
    composite_backward,
    intersect_box,
    march_rays,
    render_image,
    update_occupancy,
)

MOUTH_WEIGHT = 40.0


@dataclass(eq=False)
class FrameRecord:
    frame_id: int
    mesh: TriangleMesh
    camera: Camera
    color: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool, face region
    weight: np.ndarray  # (H, W) color-loss weight
    depth: np.ndarray  # (H, W) mesh depth along the pixel ray
    expression: np.ndarray  # (16,)
    canonical: TriangleMesh
    mouth_faces: np.ndarray  # (F,) bool
    _geometry: FrameGeometry | None = field(default=None, repr=False)

    def geometry(self) -> FrameGeometry:
        """BVH and per-face maps, built on first use."""
        if self._geometry is None:
            self._geometry = FrameGeometry(self.mesh, self.canonical)
        return self._geometry


@dataclass
class TrainConfig:
    total_steps: int = 32000
    buffer_size: int = 1700
    resample_period: int = 1500
    rays_per_step: int = 4096
    lambda_geom: float = 1.25
    huber_rho: float = 0.1
    seed: int = 0
    geom_prior: bool = True
    global_conditioning: bool = False
    learning_rate: float = 2.5e-3
    occupancy_period: int = 16
    # density equivalent of an optical-thickness cut of 0.01 per marching step
    occupancy_threshold: float = 0.01 / DELTA
    occupancy_probes: int = 2**16
    # cap on re-probed occupied cells per update; None probes all of them
    occupancy_occupied_probes: int | None = 2**16
    occupancy_shell: float | None = None
    # start from a band of cells around the training meshes instead of a full grid
    occupancy_seed_cells: int | None = 2
    holdout_last: int = 0
    frame_subset: tuple | None = None
    grid_config: HashGridConfig = field(default_factory=HashGridConfig)

    def __post_init__(self):
        for name in ("buffer_size", "resample_period", "rays_per_step", "occupancy_period",
                     "occupancy_probes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0 or self.holdout_last < 0:
            raise ValueError("step and holdout counts must be non-negative")
        if self.huber_rho <= 0:
            raise ValueError("huber_rho must be positive")


# ---------------------------------------------------------------- losses


def _huber(e: np.ndarray, rho: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(e)
    quad = a < rho
    val = np.where(quad, 0.5 * e * e, rho * (a - 0.5 * rho))
    grad = np.where(quad, e, rho * np.sign(e))
    return val, grad


def huber_loss(c_pred, c_true, rho: float = 0.1) -> float:
    if rho <= 0:
        raise ValueError("rho must be positive")
    e = np.asarray(c_pred, dtype=np.float64) - np.asarray(c_true, dtype=np.float64)
    return float(_huber(e, rho)[0].sum())


def geom_loss(depth_pred: float, depth_mesh: float, in_face: bool) -> float:
    return abs(float(depth_mesh) - float(depth_pred)) if in_face else 0.0


@dataclass
class RayTargets:
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    mask: np.ndarray  # (R,) bool
    weight: np.ndarray  # (R,)


@dataclass
class LossResult:
    value: float
    g_color: np.ndarray
    g_depth: np.ndarray
    color_mse: float


def total_loss(color, depth, targets: RayTargets, lambda_geom: float = 1.25,
               rho: float = 0.1) -> LossResult:
    """Weighted Huber color loss plus the masked L1 depth prior, summed over rays,
    with gradients w.r.t. the composited color and depth."""
    color = np.asarray(color, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    e = color - targets.color
    hv, hg = _huber(e, rho)
    w = targets.weight[:, None]
    value = float((w * hv).sum())
    g_color = w * hg
    g_depth = np.zeros_like(depth)
    if lambda_geom:
        m = targets.mask
        d = depth[m] - targets.depth[m]
        value += lambda_geom * float(np.abs(d).sum())
        g_depth[m] = lambda_geom * np.sign(d)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss evaluated to {value}")
    return LossResult(value, g_color, g_depth, float(np.mean(e * e)) if e.size else 0.0)


# ---------------------------------------------------------------- metrics


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    m = mse(a, b)
    return math.inf if m == 0 else 10.0 * math.log10(peak * peak / m)


def ssim(a, b, peak: float = 1.0, sigma: float = 1.5) -> float:
    """Mean structural similarity with an 11-tap Gaussian window, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]

        def blur(z):
            return gaussian_filter(z, sigma, truncate=3.5, mode="reflect")

        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------- training


def training_frames(scene, cfg: TrainConfig) -> list:
    frames = list(scene.frames)
    if cfg.holdout_last:
        if cfg.holdout_last >= len(frames):
            raise ValueError("holdout leaves no training frames")
        frames = frames[: len(frames) - cfg.holdout_last]
    if cfg.frame_subset is not None:
        frames = [frames[i] for i in cfg.frame_subset]
    if not frames:
        raise ValueError("no training frames")
    return frames


def _f32_box(box) -> np.ndarray:
    # boxes are stored as float32 in checkpoints; train on the rounded values
    return np.asarray(box, dtype=np.float32).astype(np.float64)


class _RayBank:
    """Per-pixel rays and targets of all training frames, flattened."""

    def __init__(self, frames, box_min, box_max):
        o, d, col, dep, msk, wt = [], [], [], [], [], []
        for f in frames:
            fo, fd = f.camera.all_rays()
            o.append(fo)
            d.append(fd)
            col.append(f.color.reshape(-1, 3))
            dep.append(f.depth.reshape(-1))
            msk.append(f.mask.reshape(-1))
            wt.append(f.weight.reshape(-1))
        self.pixels = np.array([len(x) for x in o])
        self.start = np.concatenate([[0], np.cumsum(self.pixels)[:-1]])
        self.origins = np.concatenate(o)
        self.dirs = np.concatenate(d)
        self.color = np.concatenate(col)
        self.depth = np.concatenate(dep)
        self.mask = np.concatenate(msk)
        self.weight = np.concatenate(wt)
        self.near, self.far = intersect_box(self.origins, self.dirs, box_min, box_max)

    def sample(self, rng: np.random.Generator, frames: np.ndarray, count: int):
        slot = frames[rng.integers(0, len(frames), count)]
        pix = (rng.random(count) * self.pixels[slot]).astype(np.int64)
        return slot.astype(np.int32), self.start[slot] + pix


def _buffer(seed: int, epoch: int, n_frames: int, size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch, 0xB0F])
    k = min(size, n_frames)
    return np.sort(rng.choice(n_frames, size=k, replace=False))


@dataclass
class TrainLogEntry:
    step: int
    loss: float
    psnr: float
    samples: int = 0
    occupied: int = 0


def train(scene, cfg: TrainConfig, resume=None,
          log: Callable[[TrainLogEntry], None] | None = None):
    """Optimize a radiance field on ``scene``; returns a Checkpoint.

    With ``resume`` (a Checkpoint saved by an earlier call with the same
    configuration) training continues from its step up to ``cfg.total_steps``.
    """
    from .dataset import Checkpoint

    frames = training_frames(scene, cfg)
    box_c = _f32_box(scene.box_canonical)
    box_d = _f32_box(scene.box_deformed)
    gcfg = replace(cfg.grid_config, box_min=box_c[0], box_max=box_c[1])
    field_ = RadianceField(gcfg, dtype=np.float32, global_conditioning=cfg.global_conditioning)
    threshold = float(np.float32(cfg.occupancy_threshold))
    grid = OccupancyGrid(box_d[0], box_d[1], threshold=threshold)
    adam = AdamState.for_params(field_.params, lr=cfg.learning_rate)
    start = 0
    if resume is not None:
        if resume.params.size != field_.size:
            raise ValueError("checkpoint does not match the hash-grid configuration")
        field_.params[:] = resume.params
        adam.shadow[:] = resume.shadow
        adam.m[:] = resume.adam_m
        adam.v[:] = resume.adam_v
        adam.step = resume.adam_step
        grid.ema[:] = resume.occupancy_ema
        grid.refresh_bits()
        start = resume.train_step
    else:
        field_.initialize(np.random.default_rng([cfg.seed, 0x1417]))
        adam.shadow[:] = field_.params
        if cfg.occupancy_seed_cells is not None:
            grid.seed_from_meshes([f.mesh for f in frames], cfg.occupancy_seed_cells)

    bank = _RayBank(frames, grid.box_min, grid.box_max)
    geo = GeometryStack([f.geometry() for f in frames])
    ctx = MarchContext(geo, np.stack([f.expression for f in frames]), scene.mouth_faces, grid)
    background = np.asarray(scene.background, dtype=np.float64)
    lam = cfg.lambda_geom if cfg.geom_prior else 0.0
    grad = np.zeros_like(field_.params)
    buffer = None

    for step in range(start, cfg.total_steps):
        if buffer is None or step % cfg.resample_period == 0:
            buffer = _buffer(cfg.seed, step // cfg.resample_period, len(frames), cfg.buffer_size)
        rng = np.random.default_rng([cfg.seed, step])
        slots, rays = bank.sample(rng, buffer, cfg.rays_per_step)
        batch = march_rays(bank.origins[rays], bank.dirs[rays], bank.near[rays], bank.far[rays],
                           slots, ctx, field_)
        res = composite(batch, background)
        targets = RayTargets(bank.color[rays], bank.depth[rays], bank.mask[rays], bank.weight[rays])
        loss = total_loss(res.color, res.depth, targets, lam, cfg.huber_rho)
        grad[:] = 0.0
        if len(batch):
            scale = 1.0 / cfg.rays_per_step
            g_sigma, g_rgb = composite_backward(batch, res, background, loss.g_color * scale,
                                                loss.g_depth * scale, 0.0)
            field_.backward(batch.state, g_sigma, g_rgb, grad)
        adam_step(adam, field_.params, grad)
        if (step + 1) % cfg.occupancy_period == 0:
            update_occupancy(grid, field_, ctx, np.random.default_rng([cfg.seed, step, 0x0CC]),
                             cfg.occupancy_probes, cfg.occupancy_occupied_probes,
                             cfg.occupancy_shell)
        if log is not None:
            est = math.inf if loss.color_mse == 0 else -10.0 * math.log10(loss.color_mse)
            log(TrainLogEntry(step, loss.value / cfg.rays_per_step, est, len(batch),
                              int(grid.bits.sum())))

    return Checkpoint(
        gcfg, field_.params.copy(), adam.shadow.copy(), adam.m.copy(), adam.v.copy(), adam.step,
        max(cfg.total_steps, start), cfg.seed, grid.ema.copy(),
        np.stack([box_d[0], box_d[1]]).astype(np.float32), grid.resolution,
        cfg.global_conditioning, threshold,
    )


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    mse: float
    psnr: float
    ssim: float
    depth_mae: float | None = None
    per_frame: list = field(default_factory=list)


def evaluate(checkpoint, scene, frame_indices, yaw_offset: float | None = None,
             use_shadow: bool = True) -> EvalResult:
    """Render frames and compare against their targets.

    With ``yaw_offset`` the camera orbits about the vertical axis through the
    mesh center; color metrics are then skipped and the depth error against
    a fresh raster of the frame mesh is reported instead.
    """
    from .dataset import rasterize

    fld = checkpoint.field(use_shadow)
    grid = checkpoint.occupancy()
    bg = np.asarray(scene.background, dtype=np.float64)
    rows = []
    for i in frame_indices:
        fr = scene.frames[i]
        if yaw_offset is None:
            img = render_image(fr, fld, grid, bg)
            rows.append((mse(img.color, fr.color), psnr(img.color, fr.color),
                         ssim(img.color, fr.color), None))
        else:
            pivot = fr.mesh.vertices.mean(axis=0)
            cam = fr.camera.rotated_about_y(yaw_offset, pivot)
            img = render_image(fr, fld, grid, bg, camera=cam)
            ras = rasterize(fr.mesh, cam)
            err = float(np.mean(np.abs(img.depth[ras.hit] - ras.depth[ras.hit]))) if ras.hit.any() else 0.0
            rows.append((math.nan, math.nan, math.nan, err))
    a = np.array([r[:3] for r in rows], dtype=np.float64)
    depth = [r[3] for r in rows if r[3] is not None]
    return EvalResult(float(a[:, 0].mean()), float(a[:, 1].mean()), float(a[:, 2].mean()),
                      float(np.mean(depth)) if depth else None, rows)


# ---------------------------------------------------------------- expression transfer


def transfer_expression(source_codes, source_neutral, target_neutral) -> list[np.ndarray]:
    """Re-target expressions: T_i = T_neutral + (S_i - S_neutral)."""
    sn = np.asarray(source_neutral, dtype=np.float64)
    tn = np.asarray(target_neutral, dtype=np.float64)
    for name, code in (("source neutral", sn), ("target neutral", tn)):
        if code.shape != (EXPRESSION_DIM,):
            raise LengthMismatch(f"{name} code has {code.size} entries, expected {EXPRESSION_DIM}")
    out = []
    for i, s in enumerate(source_codes):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (EXPRESSION_DIM,):
            raise LengthMismatch(f"source code {i} has {s.size} entries, expected {EXPRESSION_DIM}")
        out.append(tn + (s - sn))
    return out

