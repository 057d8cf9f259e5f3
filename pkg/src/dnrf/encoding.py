"""Multi-resolution hash-grid position encoding and SH direction encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .errors import ZeroDirection

PRIME_Y = 2654435761
PRIME_Z = 805459861
INIT_SCALE = 1e-4


@dataclass
class HashGridConfig:
    levels: int = 16
    table_size: int = 2**18
    features_per_entry: int = 8
    base_resolution: int = 16
    finest_resolution: int = 2048
    box_min: np.ndarray = field(default_factory=lambda: np.zeros(3))
    box_max: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=np.float64)
        self.box_max = np.asarray(self.box_max, dtype=np.float64)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.finest_resolution < self.base_resolution:
            raise ValueError("finest_resolution must be >= base_resolution")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if np.any(self.box_max <= self.box_min):
            raise ValueError("empty bounding box")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.finest_resolution) - math.log(self.base_resolution)) / (self.levels - 1)
        )

    def resolutions(self) -> np.ndarray:
        b = self.growth
        return np.array(
            [math.floor(self.base_resolution * b**lvl) for lvl in range(self.levels)], dtype=np.int64
        )

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_entry


class HashGrid:
    """Feature tables of shape (levels, table_size, features_per_entry).

    Levels whose full vertex lattice fits in the table are indexed densely;
    finer levels go through :func:`spatial_hash`. ``tables`` may be a view
    into a larger flat parameter buffer.
    """

    def __init__(self, config: HashGridConfig, tables: np.ndarray | None = None, dtype=np.float32):
        self.config = config
        self.resolutions = config.resolutions()
        shape = (config.levels, config.table_size, config.features_per_entry)
        if tables is None:
            tables = np.zeros(shape, dtype=dtype)
        if tables.shape != shape:
            raise ValueError(f"tables shape {tables.shape} != {shape}")
        self.tables = tables

    def initialize(self, rng: np.random.Generator) -> None:
        self.tables[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, self.tables.shape)

    def is_dense(self, level: int) -> bool:
        n = int(self.resolutions[level])
        return (n + 1) ** 3 <= self.config.table_size

    def normalize(self, points) -> np.ndarray:
        """Map canonical points into [0, 1]^3, clamping outside the box."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cfg = self.config
        x = (p - cfg.box_min) / (cfg.box_max - cfg.box_min)
        return np.ascontiguousarray(np.clip(x, 0.0, 1.0))

    def encode(self, points) -> np.ndarray:
        x = self.normalize(points)
        out = np.empty((len(x), self.config.output_dim), dtype=self.tables.dtype)
        kernels.hash_encode_forward(x, self.tables, self.resolutions, out)
        return out

    def accumulate_gradient(self, points, upstream, grad_tables: np.ndarray) -> None:
        x = self.normalize(points)
        g = np.ascontiguousarray(upstream, dtype=grad_tables.dtype)
        kernels.hash_encode_backward(x, g, self.resolutions, grad_tables)

    def corner_lookup(self, level: int, p) -> tuple[np.ndarray, np.ndarray]:
        """Table indices and trilinear weights of the 8 corners around ``p``."""
        x = self.normalize(p)[0]
        res = int(self.resolutions[level])
        pos = x * res
        base = np.clip(np.floor(pos).astype(np.int64), 0, res - 1)
        frac = pos - base
        idx, wts = [], []
        for c in range(8):
            off = np.array([c & 1, (c >> 1) & 1, (c >> 2) & 1])
            cell = base + off
            w = float(np.prod(np.where(off == 1, frac, 1.0 - frac)))
            if self.is_dense(level):
                i = int(cell[0] + (res + 1) * (cell[1] + (res + 1) * cell[2]))
            else:
                i = spatial_hash(tuple(int(v) for v in cell), self.config.table_size)
            idx.append(i)
            wts.append(w)
        return np.array(idx, dtype=np.int64), np.array(wts)


def spatial_hash(cell, table_size: int) -> int:
    """XOR of coordinates times large primes, 32-bit wrapping, modulo table size."""
    x, y, z = (int(c) & 0xFFFFFFFF for c in cell)
    h = (x ^ ((y * PRIME_Y) & 0xFFFFFFFF) ^ ((z * PRIME_Z) & 0xFFFFFFFF)) & 0xFFFFFFFF
    return h % table_size


def encode_position(grid: HashGrid, p_canonical) -> np.ndarray:
    return grid.encode(np.asarray(p_canonical, dtype=np.float64).reshape(1, 3))[0]


@dataclass
class SparseTableGradient:
    levels: np.ndarray
    indices: np.ndarray
    values: np.ndarray  # (k, features_per_entry)

    def __len__(self) -> int:
        return len(self.indices)

    def to_dense(self, shape, dtype=np.float64) -> np.ndarray:
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, (self.levels, self.indices), self.values)
        return out


def encode_position_backward(grid: HashGrid, p_canonical, upstream_gradient) -> SparseTableGradient:
    """Route ``upstream_gradient`` to the touched entries with trilinear weights.

    Entries are merged by (level, index), so colliding corners appear once.
    """
    g = np.asarray(upstream_gradient, dtype=np.float64)
    nf = grid.config.features_per_entry
    acc: dict[tuple[int, int], np.ndarray] = {}
    for lvl in range(grid.config.levels):
        gl = g[lvl * nf:(lvl + 1) * nf]
        if not np.any(gl):
            continue
        idx, w = grid.corner_lookup(lvl, p_canonical)
        for i, wi in zip(idx, w):
            if wi == 0.0:
                continue
            key = (lvl, int(i))
            acc[key] = acc.get(key, 0.0) + wi * gl
    keys = sorted(acc)
    return SparseTableGradient(
        np.array([k[0] for k in keys], dtype=np.int64),
        np.array([k[1] for k in keys], dtype=np.int64),
        np.array([acc[k] for k in keys]).reshape(-1, nf),
    )


# ---------------------------------------------------------------- directions

SH_DIM = 16

_C0 = 0.28209479177387814
_C1 = 0.48860251190291987
_C2 = (1.0925484305920792, 1.0925484305920792, 0.94617469575755997, 1.0925484305920792,
       0.54627421529603959)
_C2_OFFSET = 0.31539156525251999
_C3 = (0.59004358992664352, 2.8906114426405538, 0.45704579946446572, 0.3731763325901154,
       0.45704579946446572, 1.4453057213202769, 0.59004358992664352)


def sh_encode(dirs) -> np.ndarray:
    """Real SH basis (no Condon-Shortley phase) for bands 0..3; (n, 16).

    Order is l ascending, then m ascending within each band.
    """
    v = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    norm = np.linalg.norm(v, axis=1)
    if np.any(norm == 0.0):
        raise ZeroDirection("cannot encode a zero-length direction")
    x, y, z = (v / norm[:, None]).T
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((len(v), SH_DIM))
    out[:, 0] = _C0
    out[:, 1] = _C1 * y
    out[:, 2] = _C1 * z
    out[:, 3] = _C1 * x
    out[:, 4] = _C2[0] * x * y
    out[:, 5] = _C2[1] * y * z
    out[:, 6] = _C2[2] * zz - _C2_OFFSET
    out[:, 7] = _C2[3] * x * z
    out[:, 8] = _C2[4] * (xx - yy)
    out[:, 9] = _C3[0] * y * (3 * xx - yy)
    out[:, 10] = _C3[1] * x * y * z
    out[:, 11] = _C3[2] * y * (5 * zz - 1)
    out[:, 12] = _C3[3] * z * (5 * zz - 3)
    out[:, 13] = _C3[4] * x * (5 * zz - 1)
    out[:, 14] = _C3[5] * z * (xx - yy)
    out[:, 15] = _C3[6] * x * (xx - 3 * yy)
    return out


def encode_direction(v) -> np.ndarray:
    return sh_encode(np.asarray(v, dtype=np.float64).reshape(1, 3))[0]
