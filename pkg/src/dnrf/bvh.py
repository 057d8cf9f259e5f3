"""Axis-aligned bounding volume hierarchy for nearest-triangle queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import DegenerateTriangle, EmptyMesh
from .geometry import DEGENERATE_AREA, TriangleMesh

LEAF_SIZE = 4


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def contains(self, other: "Aabb", slack: float = 1e-9) -> bool:
        return bool(np.all(other.min >= self.min - slack) and np.all(other.max <= self.max + slack))

    def distance(self, p) -> float:
        e = np.maximum(np.maximum(self.min - p, np.asarray(p) - self.max), 0.0)
        return float(np.sqrt(e @ e))


@dataclass(frozen=True)
class NearestHit:
    face: int
    distance: float
    closest_point: np.ndarray


class Bvh:
    """Flattened tree. Node 0 is the root; ``left < 0`` marks a leaf whose
    faces are ``order[start:start + count]``."""

    def __init__(self, mesh, node_min, node_max, left, right, start, count, order):
        self.mesh = mesh
        self.tri = np.ascontiguousarray(mesh.triangles())
        self.node_min = np.ascontiguousarray(node_min, dtype=np.float64)
        self.node_max = np.ascontiguousarray(node_max, dtype=np.float64)
        self.left = np.ascontiguousarray(left, dtype=np.int32)
        self.right = np.ascontiguousarray(right, dtype=np.int32)
        self.start = np.ascontiguousarray(start, dtype=np.int32)
        self.count = np.ascontiguousarray(count, dtype=np.int32)
        self.order = np.ascontiguousarray(order, dtype=np.int32)

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def aabb(self, node: int) -> Aabb:
        return Aabb(self.node_min[node], self.node_max[node])

    def depth(self) -> int:
        best = 0
        stack = [(0, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.left[node] >= 0:
                stack.append((int(self.left[node]), d + 1))
                stack.append((int(self.right[node]), d + 1))
        return best

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def query(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batched :func:`nearest_triangle`: faces, distances, closest points."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        return kernels.bvh_nearest(
            pts, self.node_min, self.node_max, self.left, self.right,
            self.start, self.count, self.order, self.tri,
        )


def build_bvh(mesh: TriangleMesh) -> Bvh:
    """Median split on the longest centroid-extent axis; leaves hold <= 4 faces."""
    if mesh.n_faces == 0:
        raise EmptyMesh("cannot build a BVH over an empty mesh")
    if np.any(mesh.face_areas() <= DEGENERATE_AREA):
        raise DegenerateTriangle("mesh contains degenerate faces")
    tri = mesh.triangles()
    tri_min = tri.min(axis=1)
    tri_max = tri.max(axis=1)
    cent = tri.mean(axis=1)

    node_min, node_max, left, right, start, count = [], [], [], [], [], []
    order: list[int] = []

    def new_node(faces: np.ndarray) -> int:
        node_min.append(tri_min[faces].min(axis=0))
        node_max.append(tri_max[faces].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    root_faces = np.arange(mesh.n_faces)
    stack = [(new_node(root_faces), root_faces)]
    while stack:
        node, faces = stack.pop()
        if len(faces) <= LEAF_SIZE:
            start[node] = len(order)
            count[node] = len(faces)
            order.extend(int(f) for f in faces)
            continue
        extent = cent[faces].max(axis=0) - cent[faces].min(axis=0)
        axis = int(np.argmax(extent))
        ranked = faces[np.argsort(cent[faces, axis], kind="stable")]
        half = len(ranked) // 2
        lo, hi = ranked[:half], ranked[half:]
        ln = new_node(lo)
        rn = new_node(hi)
        left[node] = ln
        right[node] = rn
        stack.append((rn, hi))
        stack.append((ln, lo))
    return Bvh(mesh, np.array(node_min), np.array(node_max), left, right, start, count, order)


def point_triangle_distance(p, tri) -> tuple[float, np.ndarray]:
    """Exact distance from ``p`` to the closed triangle ``tri`` (3x3 corners)."""
    t = np.ascontiguousarray(np.asarray(tri, dtype=np.float64).reshape(1, 3, 3))
    area = 0.5 * np.linalg.norm(np.cross(t[0, 1] - t[0, 0], t[0, 2] - t[0, 0]))
    if area <= DEGENERATE_AREA:
        raise DegenerateTriangle(f"triangle area {area:.3e} m^2")
    pts = np.ascontiguousarray(np.asarray(p, dtype=np.float64).reshape(1, 3))
    d, q = kernels.closest_points_on_triangles(pts, t)
    return float(d[0]), q[0]


def nearest_triangle(bvh: Bvh, p) -> NearestHit:
    faces, dist, closest = bvh.query(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return NearestHit(int(faces[0]), float(dist[0]), closest[0])
