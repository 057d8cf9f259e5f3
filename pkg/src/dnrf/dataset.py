"""Scene files, the synthetic scene generator and checkpoint serialization.

Scene layout::

    scene/manifest          JSON, schema below
    scene/canonical.obj
    scene/frames/NNNN.obj   deformed mesh (topology twin of canonical.obj)
    scene/frames/NNNN.png   8-bit RGB target
    scene/frames/NNNN.mask.png   8-bit face mask (255 = face)
    scene/frames/NNNN.w.pfm      color-loss weight map
    scene/frames/NNNN.z.pfm      mesh depth, as distance along the pixel ray

Manifest keys: ``format``, ``version``, ``canonical_mesh``, ``background``,
``mouth_faces``, ``box_canonical``, ``box_deformed`` (each ``[min, max]``),
``generator`` (optional parameter block) and ``frames``, a list of objects
with ``id``, ``mesh``, ``K``, ``pose``, ``width``, ``height``, ``color``,
``mask``, ``weight``, ``depth`` and ``expression`` (16 numbers).
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .encoding import HashGridConfig
from .errors import (
    CorruptPayload,
    IoFailure,
    ManifestError,
    TopologyMismatch,
    VersionMismatch,
)
from .geometry import TriangleMesh, read_obj, write_obj
from .network import EXPRESSION_DIM, RadianceField
from .renderer import Camera, OccupancyGrid

MANIFEST_FORMAT = "dnrf-scene"
MANIFEST_VERSION = 1
BACKGROUND = (1.0, 1.0, 1.0)

# synthetic scene constants
SPHERE_RADIUS = 0.1
SUBDIVISIONS = 2
CAMERA_DISTANCE = 0.5
MAX_YAW_DEG = 40.0
MAX_PITCH_DEG = 10.0
FOCAL_PER_PIXEL = 1.6
MOUTH_DIRECTION = np.array([0.0, -0.35, 1.0]) / math.hypot(0.35, 1.0)
MOUTH_HALF_ANGLE = math.radians(35.0)
BUMP_WIDTH = 0.35  # radians
MOUTH_WEIGHT = 40.0
BOX_PAD_DEFORMED = 0.1
BOX_PAD_CANONICAL = 0.25


# ---------------------------------------------------------------- image IO


def write_png(path, rgb) -> None:
    a = np.asarray(rgb, dtype=np.float64)
    img = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(img).save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            a = np.asarray(im)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return a.astype(np.float64) / 255.0


def write_mask_png(path, mask) -> None:
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    try:
        Image.fromarray(img, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_mask_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            a = np.asarray(im.convert("L"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return a >= 128


def write_pfm(path, image) -> None:
    """Grayscale ("Pf") or RGB ("PF") PFM, big-endian, rows bottom to top."""
    a = np.asarray(image, dtype=np.float32)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"cannot store array of shape {a.shape} as PFM")
    h, w = a.shape[:2]
    header = tag + b"\n%d %d\n1.0\n" % (w, h)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(np.flipud(a)).astype(">f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_pfm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise CorruptPayload(f"{path}: truncated PFM header")
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace byte ends the header
    tag, w, h, scale = tokens[0], int(tokens[1]), int(tokens[2]), float(tokens[3])
    if tag not in (b"Pf", b"PF"):
        raise CorruptPayload(f"{path}: not a PFM file")
    ch = 1 if tag == b"Pf" else 3
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * ch
    if len(data) - pos < 4 * n:
        raise CorruptPayload(f"{path}: PFM payload truncated")
    a = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(np.float32)
    a = a.reshape(h, w) if ch == 1 else a.reshape(h, w, 3)
    return np.flipud(a).copy()


# ---------------------------------------------------------------- synthetic scene


def icosphere(subdivisions: int = SUBDIVISIONS, radius: float = SPHERE_RADIUS) -> TriangleMesh:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    vs = np.array(v) * radius
    fs = np.array(faces, dtype=np.int64)
    tri = vs[fs]
    outward = np.einsum("fi,fi->f", np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]),
                        tri.mean(axis=1)) > 0
    fs[~outward] = fs[~outward][:, [0, 2, 1]]
    return TriangleMesh.from_arrays(vs, fs)


def _angle_to_mouth(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    u = p / np.linalg.norm(p, axis=-1, keepdims=True)
    return np.arccos(np.clip(u @ MOUTH_DIRECTION, -1.0, 1.0))


def bump_weight(points) -> np.ndarray:
    return np.exp(-0.5 * (_angle_to_mouth(points) / BUMP_WIDTH) ** 2)


def mouth_weight(points) -> np.ndarray:
    c = np.cos(_angle_to_mouth(points))
    cut = math.cos(MOUTH_HALF_ANGLE)
    return np.clip((c - cut) / (1.0 - cut), 0.0, 1.0)


def mouth_face_flags(canonical: TriangleMesh) -> np.ndarray:
    inside = mouth_weight(canonical.vertices) > 0.0
    return inside[canonical.faces].any(axis=1)


def deform(canonical: TriangleMesh, coefficient: float, amplitude: float) -> TriangleMesh:
    """Push vertices along their radial normal by a smooth bump around the mouth."""
    v = canonical.vertices
    n = v / np.linalg.norm(v, axis=1, keepdims=True)
    radius = float(np.linalg.norm(v, axis=1).mean())
    disp = amplitude * coefficient * radius * bump_weight(v)
    return canonical.with_vertices(v + disp[:, None] * n)


_WAVES = 20.0 * np.array([[1.0, 0.5, 0.2], [-0.4, 1.0, 0.6], [0.3, -0.7, 1.0]])
_PHASES = np.array([0.0, 1.0, 2.0])
_MOUTH_TINT = np.array([0.35, -0.25, -0.25])


def emission(canonical_points, coefficient) -> np.ndarray:
    """Surface color as a function of canonical position and expression."""
    p = np.asarray(canonical_points, dtype=np.float64).reshape(-1, 3)
    base = 0.5 + 0.35 * np.sin(p @ _WAVES.T + _PHASES)
    coef = np.broadcast_to(np.asarray(coefficient, dtype=np.float64), (len(p),))
    tint = (coef * mouth_weight(p))[:, None] * _MOUTH_TINT
    return np.clip(base + tint, 0.0, 1.0)


def orbit_camera(yaw_deg: float, pitch_deg: float, resolution: int,
                 distance: float = CAMERA_DISTANCE) -> Camera:
    """Camera on a sphere around the origin looking at it; +y is world up."""
    yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
    center = distance * np.array([math.sin(yaw) * math.cos(pitch), math.sin(pitch),
                                  math.cos(yaw) * math.cos(pitch)])
    z = -center / np.linalg.norm(center)
    down = np.array([0.0, -1.0, 0.0])
    y = down - (down @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    pose = np.eye(4)
    pose[:3, :3] = np.stack([x, y, z], axis=1)
    pose[:3, 3] = center
    f = FOCAL_PER_PIXEL * resolution
    k = np.array([[f, 0.0, resolution / 2.0], [0.0, f, resolution / 2.0], [0.0, 0.0, 1.0]])
    return Camera(k, pose, resolution, resolution)


@dataclass
class Raster:
    hit: np.ndarray  # (H, W) bool
    face: np.ndarray  # (H, W) int, -1 where no hit
    depth: np.ndarray  # distance along the pixel ray, 0 where no hit
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics


def rasterize(mesh: TriangleMesh, cam: Camera) -> Raster:
    """Screen-space triangle rasterization with a z-buffer, sampling pixel centers."""
    h, w = cam.height, cam.width
    r = cam.pose[:3, :3]
    c = cam.pose[:3, 3]
    vc = (mesh.vertices - c) @ r  # camera coordinates
    z = vc[:, 2]
    u = cam.K[0, 0] * vc[:, 0] / z + cam.K[0, 2]
    v = cam.K[1, 1] * vc[:, 1] / z + cam.K[1, 2]
    zbuf = np.full((h, w), np.inf)
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    for f, (a, b, d) in enumerate(mesh.faces):
        if min(z[a], z[b], z[d]) <= 0.0:
            continue
        xs = (u[a], u[b], u[d])
        ys = (v[a], v[b], v[d])
        x0 = max(int(math.floor(min(xs) - 0.5)), 0)
        x1 = min(int(math.ceil(max(xs) - 0.5)), w - 1)
        y0 = max(int(math.floor(min(ys) - 0.5)), 0)
        y1 = min(int(math.ceil(max(ys) - 0.5)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if area == 0.0:
            continue
        py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1] + 0.5
        e0 = ((xs[2] - xs[1]) * (py - ys[1]) - (ys[2] - ys[1]) * (px - xs[1])) / area
        e1 = ((xs[0] - xs[2]) * (py - ys[2]) - (ys[0] - ys[2]) * (px - xs[2])) / area
        e2 = 1.0 - e0 - e1
        inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
        if not inside.any():
            continue
        q0, q1, q2 = e0 / z[a], e1 / z[b], e2 / z[d]
        s = q0 + q1 + q2
        depth_z = 1.0 / s
        win = zbuf[y0:y1 + 1, x0:x1 + 1]
        take = inside & (depth_z < win)
        win[take] = depth_z[take]
        face_id[y0:y1 + 1, x0:x1 + 1][take] = f
        bb = np.stack([q0 / s, q1 / s, q2 / s], axis=-1)
        bary[y0:y1 + 1, x0:x1 + 1][take] = bb[take]
    hit = face_id >= 0
    fidx = np.where(hit, face_id, 0)
    corners = mesh.vertices[mesh.faces[fidx]]  # (H, W, 3, 3)
    pts = np.einsum("hwk,hwkj->hwj", bary, corners)
    depth = np.where(hit, np.linalg.norm(pts - c, axis=-1), 0.0)
    return Raster(hit, face_id, depth, bary)


def shade(raster: Raster, canonical: TriangleMesh, coefficient: float, background) -> np.ndarray:
    h, w = raster.hit.shape
    out = np.empty((h, w, 3))
    out[:] = np.asarray(background, dtype=np.float64)
    corners = canonical.vertices[canonical.faces[raster.face[raster.hit]]]
    canon_pts = np.einsum("nk,nkj->nj", raster.bary[raster.hit], corners)
    out[raster.hit] = emission(canon_pts, coefficient)
    return out


def _padded_box(lo, hi, pad):
    ext = float(np.max(hi - lo))
    return lo - pad * ext, hi + pad * ext


def generate_synthetic_scene(out, seed: int = 0, frames: int = 60, resolution: int = 64,
                             amplitude: float = 0.15) -> Path:
    """Write a deterministic synthetic dynamic scene to directory ``out``."""
    if frames < 2:
        raise ValueError("a scene needs at least 2 frames")
    if resolution < 1:
        raise ValueError("resolution must be positive")
    root = Path(out)
    try:
        (root / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {root}: {exc}") from exc
    rng = np.random.default_rng(seed)
    canonical = icosphere()
    mouth = mouth_face_flags(canonical)
    write_obj(root / "canonical.obj", canonical)
    coefs = rng.uniform(-1.0, 1.0, frames)
    yaws = rng.uniform(-MAX_YAW_DEG, MAX_YAW_DEG, frames)
    pitches = rng.uniform(-MAX_PITCH_DEG, MAX_PITCH_DEG, frames)
    records = []
    lo, hi = canonical.bounds()
    for i in range(frames):
        mesh = deform(canonical, coefs[i], amplitude)
        cam = orbit_camera(yaws[i], pitches[i], resolution)
        ras = rasterize(mesh, cam)
        rgb = shade(ras, canonical, coefs[i], BACKGROUND)
        weight = np.where(ras.hit & mouth[np.where(ras.hit, ras.face, 0)], MOUTH_WEIGHT, 1.0)
        stem = f"frames/{i:04d}"
        write_obj(root / f"{stem}.obj", mesh)
        write_png(root / f"{stem}.png", rgb)
        write_mask_png(root / f"{stem}.mask.png", ras.hit)
        write_pfm(root / f"{stem}.w.pfm", weight)
        write_pfm(root / f"{stem}.z.pfm", ras.depth)
        m_lo, m_hi = mesh.bounds()
        lo, hi = np.minimum(lo, m_lo), np.maximum(hi, m_hi)
        expr = np.zeros(EXPRESSION_DIM)
        expr[0] = coefs[i]
        records.append({
            "id": i, "mesh": f"{stem}.obj",
            "K": cam.K.tolist(), "pose": cam.pose.tolist(),
            "width": resolution, "height": resolution,
            "color": f"{stem}.png", "mask": f"{stem}.mask.png",
            "weight": f"{stem}.w.pfm", "depth": f"{stem}.z.pfm",
            "expression": expr.tolist(),
        })
    c_lo, c_hi = _padded_box(*canonical.bounds(), BOX_PAD_CANONICAL)
    d_lo, d_hi = _padded_box(lo, hi, BOX_PAD_DEFORMED)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "canonical_mesh": "canonical.obj",
        "background": list(BACKGROUND),
        "mouth_faces": np.flatnonzero(mouth).tolist(),
        "box_canonical": [c_lo.tolist(), c_hi.tolist()],
        "box_deformed": [d_lo.tolist(), d_hi.tolist()],
        "generator": {
            "seed": seed, "frames": frames, "resolution": resolution, "amplitude": amplitude,
            "radius": SPHERE_RADIUS, "subdivisions": SUBDIVISIONS,
            "camera_distance": CAMERA_DISTANCE, "max_yaw_deg": MAX_YAW_DEG,
            "max_pitch_deg": MAX_PITCH_DEG, "focal_per_pixel": FOCAL_PER_PIXEL,
        },
        "frames": records,
    }
    try:
        (root / "manifest").write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest: {exc}") from exc
    return root


# ---------------------------------------------------------------- loading


@dataclass
class Scene:
    root: Path
    canonical: TriangleMesh
    frames: list
    background: np.ndarray
    mouth_faces: np.ndarray  # (F,) bool
    box_canonical: np.ndarray  # (2, 3)
    box_deformed: np.ndarray  # (2, 3)
    generator: dict | None = None

    def __len__(self) -> int:
        return len(self.frames)


def _field(obj: dict, key: str, where: str):
    if key not in obj:
        raise ManifestError(f"{where}: missing field '{key}'")
    return obj[key]


def _box(value, where: str) -> np.ndarray:
    b = np.asarray(value, dtype=np.float64)
    if b.shape != (2, 3) or np.any(b[1] <= b[0]):
        raise ManifestError(f"{where}: expected [[min x,y,z], [max x,y,z]] with min < max")
    return b


def load_scene(path) -> Scene:
    from .trainer import FrameRecord

    root = Path(path)
    mpath = root / "manifest" if root.is_dir() else root
    root = mpath.parent
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise ManifestError(f"{mpath}: cannot read manifest ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{mpath}: field 'format' must be '{MANIFEST_FORMAT}'")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{mpath}: unsupported field 'version' {manifest.get('version')!r}")

    def existing(rel, where):
        p = root / str(rel)
        if not p.is_file():
            raise ManifestError(f"{where}: referenced file {p} does not exist")
        return p

    canonical = read_obj(existing(_field(manifest, "canonical_mesh", str(mpath)), "canonical_mesh"))
    mouth = np.zeros(canonical.n_faces, dtype=bool)
    idx = np.asarray(_field(manifest, "mouth_faces", str(mpath)), dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= canonical.n_faces):
        raise ManifestError(f"{mpath}: field 'mouth_faces' has out-of-range face indices")
    mouth[idx] = True
    background = np.asarray(_field(manifest, "background", str(mpath)), dtype=np.float64)
    if background.shape != (3,):
        raise ManifestError(f"{mpath}: field 'background' must be an RGB triple")
    box_c = _box(_field(manifest, "box_canonical", str(mpath)), f"{mpath}: box_canonical")
    box_d = _box(_field(manifest, "box_deformed", str(mpath)), f"{mpath}: box_deformed")

    frames = []
    for n, rec in enumerate(_field(manifest, "frames", str(mpath))):
        where = f"{mpath}: frames[{n}]"
        mesh_path = existing(_field(rec, "mesh", where), f"{where}.mesh")
        paths = {k: existing(_field(rec, k, where), f"{where}.{k}")
                 for k in ("color", "mask", "weight", "depth")}
        raw = read_obj(mesh_path)
        if raw.faces.shape != canonical.faces.shape or not np.array_equal(raw.faces, canonical.faces):
            raise TopologyMismatch(f"{mesh_path}: face list differs from the canonical mesh")
        mesh = canonical.with_vertices(raw.vertices)
        try:
            cam = Camera(np.array(_field(rec, "K", where), dtype=np.float64),
                         np.array(_field(rec, "pose", where), dtype=np.float64),
                         int(_field(rec, "width", where)), int(_field(rec, "height", where)))
        except (ValueError, TypeError) as exc:
            raise ManifestError(f"{where}: invalid camera ({exc})") from exc
        expr = np.asarray(_field(rec, "expression", where), dtype=np.float64)
        if expr.shape != (EXPRESSION_DIM,):
            raise ManifestError(f"{where}.expression: expected {EXPRESSION_DIM} values")
        color = read_png(paths["color"])[..., :3]
        mask = read_mask_png(paths["mask"])
        weight = read_pfm(paths["weight"]).astype(np.float64)
        depth = read_pfm(paths["depth"]).astype(np.float64)
        for key, img in (("color", color), ("mask", mask), ("weight", weight), ("depth", depth)):
            if img.shape[:2] != (cam.height, cam.width):
                raise ManifestError(f"{where}.{key}: image size {img.shape[1]}x{img.shape[0]} "
                                    f"does not match camera {cam.width}x{cam.height}")
        if not np.all(np.isfinite(depth[mask])):
            raise ManifestError(f"{where}.depth: non-finite depth inside the face mask")
        frames.append(FrameRecord(int(_field(rec, "id", where)), mesh, cam, color, mask, weight,
                                  depth, expr, canonical, mouth))
    if not frames:
        raise ManifestError(f"{mpath}: field 'frames' is empty")
    return Scene(root, canonical, frames, background, mouth, box_c, box_d,
                 manifest.get("generator"))


# ---------------------------------------------------------------- oracle field


class OracleField:
    """Analytic stand-in for the learned field on a synthetic scene.

    Density is a large constant inside the canonical mesh (a convex
    polytope) and zero outside; color is the generator's emission at the
    canonical sample point.
    """

    global_conditioning = False

    def __init__(self, canonical: TriangleMesh, inside_density: float = 1e5):
        tri = canonical.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        self.normals = n / np.linalg.norm(n, axis=1, keepdims=True)
        self.offsets = np.einsum("fi,fi->f", self.normals, tri[:, 0])
        self.inside_density = inside_density

    def density(self, canon, expression):
        canon = np.asarray(canon, dtype=np.float64)
        inside = np.all(canon @ self.normals.T <= self.offsets, axis=1)
        expr = np.broadcast_to(np.asarray(expression, dtype=np.float64), (len(canon), EXPRESSION_DIM))
        sigma = np.where(inside, self.inside_density, 0.0)
        return sigma, {"canon": canon, "coef": np.ascontiguousarray(expr[:, 0])}

    def color(self, state, sh):
        return emission(state["canon"], state["coef"]), state


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"DNRF"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<u4")}
_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1, np.dtype("uint32"): 2}


@dataclass
class Checkpoint:
    grid_config: HashGridConfig
    params: np.ndarray  # float32 flat buffer, live weights
    shadow: np.ndarray  # EMA of params, used for rendering
    adam_m: np.ndarray
    adam_v: np.ndarray
    adam_step: int
    train_step: int
    seed: int
    occupancy_ema: np.ndarray
    occupancy_box: np.ndarray  # (2, 3) float32
    occupancy_resolution: int
    global_conditioning: bool = False
    occupancy_threshold: float = 0.01
    extra: dict = field(default_factory=dict)

    def field(self, use_shadow: bool = True) -> RadianceField:
        p = self.shadow if use_shadow else self.params
        return RadianceField(self.grid_config, p.copy(), global_conditioning=self.global_conditioning)

    def occupancy(self) -> OccupancyGrid:
        g = OccupancyGrid(self.occupancy_box[0].astype(np.float64),
                          self.occupancy_box[1].astype(np.float64), self.occupancy_resolution,
                          threshold=self.occupancy_threshold)
        g.ema = self.occupancy_ema.astype(np.float32).copy()
        g.refresh_bits()
        return g


def _sections(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    cfg = ck.grid_config
    return [
        ("grid_config", np.array([cfg.levels, cfg.table_size, cfg.features_per_entry,
                                  cfg.base_resolution, cfg.finest_resolution], dtype=np.uint32)),
        ("grid_box", np.concatenate([cfg.box_min, cfg.box_max]).astype(np.float32)),
        ("params", ck.params.astype(np.float32, copy=False)),
        ("shadow", ck.shadow.astype(np.float32, copy=False)),
        ("adam_m", ck.adam_m.astype(np.float32, copy=False)),
        ("adam_v", ck.adam_v.astype(np.float32, copy=False)),
        ("counters", np.array([ck.adam_step, ck.train_step, ck.seed], dtype=np.uint32)),
        ("occupancy_ema", ck.occupancy_ema.astype(np.float32, copy=False)),
        ("occupancy_box", ck.occupancy_box.reshape(-1).astype(np.float32)),
        ("flags", np.array([ck.occupancy_resolution, int(ck.global_conditioning)], dtype=np.uint32)),
        ("occupancy_threshold", np.array([ck.occupancy_threshold], dtype=np.float32)),
    ]


def save_checkpoint(ck: Checkpoint, path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    secs = _sections(ck)
    parts.append(struct.pack("<I", len(secs)))
    for name, arr in secs:
        nb = name.encode("ascii")
        dt = arr.dtype.newbyteorder("<")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BQ", _CODES[np.dtype(arr.dtype.name)], arr.size))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    try:
        Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptPayload(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    pos = 8
    try:
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        secs: dict[str, np.ndarray] = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + ln].decode("ascii")
            pos += ln
            code, count = struct.unpack_from("<BQ", body, pos)
            pos += 9
            dt = _DTYPES[code]
            end = pos + count * dt.itemsize
            if end > len(body):
                raise CorruptPayload(f"{path}: section '{name}' truncated")
            secs[name] = np.frombuffer(body, dtype=dt, count=count, offset=pos).copy()
            pos = end
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptPayload(f"{path}: malformed section table") from exc
    if pos != len(body) or zlib.crc32(body) != crc:
        raise CorruptPayload(f"{path}: length or checksum mismatch")
    try:
        g = secs["grid_config"]
        box = secs["grid_box"].astype(np.float64)
        cfg = HashGridConfig(int(g[0]), int(g[1]), int(g[2]), int(g[3]), int(g[4]), box[:3], box[3:])
        counters = secs["counters"]
        flags = secs["flags"]
        ck = Checkpoint(
            cfg, secs["params"].astype(np.float32), secs["shadow"].astype(np.float32),
            secs["adam_m"].astype(np.float32), secs["adam_v"].astype(np.float32),
            int(counters[0]), int(counters[1]), int(counters[2]),
            secs["occupancy_ema"].astype(np.float32),
            secs["occupancy_box"].astype(np.float32).reshape(2, 3), int(flags[0]), bool(flags[1]),
            float(secs["occupancy_threshold"][0]),
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise CorruptPayload(f"{path}: missing or invalid section ({exc})") from exc
    expected = RadianceField.parameter_count(cfg)
    for key in ("params", "shadow", "adam_m", "adam_v"):
        if getattr(ck, key).size != expected:
            raise CorruptPayload(f"{path}: section '{key}' has wrong length")
    if ck.occupancy_ema.size != ck.occupancy_resolution**3:
        raise CorruptPayload(f"{path}: occupancy grid has wrong length")
    return ck
