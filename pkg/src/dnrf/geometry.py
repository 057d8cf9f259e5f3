"""Triangle meshes, per-triangle frames and the deformed-to-canonical map.

A point near a deformed mesh is carried to canonical space by the affine
map that takes the local frame of its nearest deformed triangle onto the
frame of the same triangle in the canonical mesh, with an isotropic scale
absorbing area change. Maps of the edge-adjacent faces are blended with
exponential distance weights so the warp stays continuous across edges.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateTriangle, EmptyMesh, IoFailure, TopologyMismatch

DEGENERATE_AREA = 1e-12
BETA_ADJACENT = 4.0
BETA_SELF = 1.0


class ScalingMode(enum.Enum):
    # lambda = sqrt(a_canon / a_def): maps a uniformly scaled twin back exactly
    GEOMETRIC_SQRT = "geometric_sqrt"
    # lambda = a_def / a_canon, the ratio taken literally
    LITERAL_AREA_RATIO = "literal_area_ratio"


def _edge_adjacency(faces: np.ndarray) -> np.ndarray:
    """Faces sharing an edge with each face, padded with -1."""
    n = len(faces)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    owner = np.tile(np.arange(n), 3)
    order = np.lexsort((owner, edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    neighbours: list[set[int]] = [set() for _ in range(n)]
    i = 0
    while i < len(edges):
        j = i + 1
        while j < len(edges) and edges[j, 0] == edges[i, 0] and edges[j, 1] == edges[i, 1]:
            j += 1
        group = owner[i:j]
        for a in group:
            for b in group:
                if a != b:
                    neighbours[a].add(int(b))
        i = j
    width = max(3, max((len(s) for s in neighbours), default=0))
    adj = np.full((n, width), -1, dtype=np.int32)
    for f, s in enumerate(neighbours):
        nb = sorted(s)
        adj[f, : len(nb)] = nb
    return adj


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertex positions in meters plus shared topology.

    Canonical and deformed instances of one scene hold the *same* ``faces``
    and ``adjacency`` objects; :meth:`with_vertices` creates such twins.
    """

    vertices: np.ndarray
    faces: np.ndarray
    adjacency: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices, faces, check_degenerate: bool = True) -> "TriangleMesh":
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        f = np.ascontiguousarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("vertices must be (V, 3) and faces (F, 3)")
        if len(f) == 0:
            raise EmptyMesh("mesh has no faces")
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("face index out of range")
        mesh = cls(v, f, _edge_adjacency(f))
        if check_degenerate:
            mesh.check_degenerate()
        return mesh

    def with_vertices(self, vertices, check_degenerate: bool = True) -> "TriangleMesh":
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        if v.shape != self.vertices.shape:
            raise TopologyMismatch(
                f"vertex count {len(v)} does not match twin with {len(self.vertices)}"
            )
        mesh = TriangleMesh(v, self.faces, self.adjacency)
        if check_degenerate:
            mesh.check_degenerate()
        return mesh

    def shares_topology(self, other: "TriangleMesh") -> bool:
        return (
            self.vertices.shape == other.vertices.shape
            and self.faces.shape == other.faces.shape
            and np.array_equal(self.faces, other.faces)
        )

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return np.ascontiguousarray(self.vertices[self.faces])

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def centroids(self) -> np.ndarray:
        return self.triangles().mean(axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def check_degenerate(self) -> None:
        areas = self.face_areas()
        bad = np.flatnonzero(areas <= DEGENERATE_AREA)
        if len(bad):
            raise DegenerateTriangle(
                f"{len(bad)} face(s) with area <= {DEGENERATE_AREA} m^2, first is face {bad[0]}"
            )


@dataclass(frozen=True)
class TriangleFrame:
    rotation: np.ndarray  # columns: tangent, bitangent, normal
    translation: np.ndarray
    area: float

    @property
    def homogeneous(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class DeformationGradient:
    matrix: np.ndarray

    def apply(self, p) -> np.ndarray:
        return canonicalize(p, self)


def _frames_from_triangles(tris: np.ndarray):
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    cross = np.cross(e1, e2)
    twice_area = np.linalg.norm(cross, axis=1)
    area = 0.5 * twice_area
    bad = np.flatnonzero(area <= DEGENERATE_AREA)
    if len(bad):
        raise DegenerateTriangle(f"triangle {bad[0]} has area {area[bad[0]]:.3e} m^2")
    tangent = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    normal = cross / twice_area[:, None]
    bitangent = np.cross(normal, tangent)
    rot = np.stack([tangent, bitangent, normal], axis=2)
    return rot, tris[:, 0].copy(), area


def triangle_frame(mesh: TriangleMesh, face: int) -> TriangleFrame:
    if not 0 <= face < mesh.n_faces:
        raise IndexError(f"face {face} out of range for mesh with {mesh.n_faces} faces")
    rot, trans, area = _frames_from_triangles(mesh.vertices[mesh.faces[face]][None])
    return TriangleFrame(rot[0], trans[0], float(area[0]))


def _scale(a_def, a_canon, mode: ScalingMode):
    if mode is ScalingMode.GEOMETRIC_SQRT:
        return np.sqrt(a_canon / a_def)
    if mode is ScalingMode.LITERAL_AREA_RATIO:
        return a_def / a_canon
    raise ValueError(f"unknown scaling mode {mode!r}")


def deformation_gradient(
    def_frame: TriangleFrame,
    canon_frame: TriangleFrame,
    scaling_mode: ScalingMode = ScalingMode.GEOMETRIC_SQRT,
) -> DeformationGradient:
    lam = float(_scale(def_frame.area, canon_frame.area, scaling_mode))
    scale = np.diag([lam, lam, lam, 1.0])
    l_def_inv = np.eye(4)
    l_def_inv[:3, :3] = def_frame.rotation.T
    l_def_inv[:3, 3] = -def_frame.rotation.T @ def_frame.translation
    m = canon_frame.homogeneous @ scale @ l_def_inv
    m[3] = (0.0, 0.0, 0.0, 1.0)
    return DeformationGradient(m)


def face_deformation_gradients(
    mesh_def: TriangleMesh,
    mesh_canon: TriangleMesh,
    scaling_mode: ScalingMode = ScalingMode.GEOMETRIC_SQRT,
) -> np.ndarray:
    """All per-face maps at once, as (F, 3, 4) affine blocks."""
    if not mesh_def.shares_topology(mesh_canon):
        raise TopologyMismatch("deformed and canonical meshes are not topology twins")
    r_d, t_d, a_d = _frames_from_triangles(mesh_def.triangles())
    r_c, t_c, a_c = _frames_from_triangles(mesh_canon.triangles())
    lam = _scale(a_d, a_c, scaling_mode)
    lin = lam[:, None, None] * np.einsum("fij,fkj->fik", r_c, r_d)
    out = np.empty((mesh_def.n_faces, 3, 4))
    out[:, :, :3] = lin
    out[:, :, 3] = t_c - np.einsum("fij,fj->fi", lin, t_d)
    return out


def blend_weights(p, centroids: np.ndarray, nearest_face: int, adjacency: np.ndarray):
    """Faces contributing to the blend and their (unnormalised) weights."""
    members = [int(nearest_face)] + [int(g) for g in adjacency[nearest_face] if g >= 0]
    dist = np.linalg.norm(centroids[members] - np.asarray(p, dtype=np.float64), axis=1)
    beta = np.full(len(members), BETA_ADJACENT)
    beta[0] = BETA_SELF
    return members, np.exp(-beta * dist)


def blended_gradient(
    p,
    mesh_def: TriangleMesh,
    mesh_canon: TriangleMesh,
    nearest_face: int,
    scaling_mode: ScalingMode = ScalingMode.GEOMETRIC_SQRT,
) -> DeformationGradient:
    p = np.asarray(p, dtype=np.float64)
    members, w = blend_weights(p, mesh_def.centroids(), nearest_face, mesh_def.adjacency)
    mats = [
        deformation_gradient(
            triangle_frame(mesh_def, f), triangle_frame(mesh_canon, f), scaling_mode
        ).matrix
        for f in members
    ]
    blend = np.einsum("k,kij->ij", w, np.array(mats)) / w.sum()
    blend[3] = (0.0, 0.0, 0.0, 1.0)
    return DeformationGradient(blend)


def canonicalize(p, gradient: DeformationGradient) -> np.ndarray:
    m = gradient.matrix
    h = m @ np.append(np.asarray(p, dtype=np.float64), 1.0)
    return h[:3] / h[3]


# ---------------------------------------------------------------- OBJ


def read_obj(path, check_degenerate: bool = True) -> TriangleMesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) != 3:
                raise ValueError(f"{path}: only triangular faces are supported")
            faces.append(idx)
    return TriangleMesh.from_arrays(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        check_degenerate=check_degenerate,
    )


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
