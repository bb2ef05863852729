"""Tri-grid and pyramid tri-grid storage with differentiable point queries.

A tri-grid holds three axis-aligned feature planes (XY, XZ, YZ), each with a
small stack of depth layers along the plane normal.  Values are stored as
``[plane][layer][channel][row][col]``.  A point is projected onto every plane,
trilinearly interpolated over (layer, row, col) and the three plane features
are summed.  A pyramid sums the features of tri-grids at several resolutions.

Coordinates in ``[-1, 1]`` map affinely onto texel centres (``-1`` is the
first texel, ``+1`` the last); points outside the cube are clamped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numba import njit

# (in-plane u axis, in-plane v axis, normal axis) for the XY, XZ and YZ planes.
PLANE_AXES = ((0, 1, 2), (0, 2, 1), (1, 2, 0))
PLANE_NAMES = ("XY", "XZ", "YZ")
CORNERS_PER_PLANE = 8
CORNERS_PER_LEVEL = 3 * CORNERS_PER_PLANE


class InvalidInput(ValueError):
    """Raised for non-finite inputs or inconsistent shapes."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class TriGrid:
    """Dense tri-grid, ``values.shape == (3, depth_layers, channels, R, R)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float32)
        if v.ndim != 5 or v.shape[0] != 3 or v.shape[3] != v.shape[4]:
            raise InvalidInput(f"tri-grid values must be (3, D, C, R, R), got {v.shape}")
        res = v.shape[3]
        if res < 2 or not _is_pow2(res):
            raise InvalidInput(f"resolution must be a power of two >= 2, got {res}")
        if v.shape[1] < 1 or v.shape[2] < 1:
            raise InvalidInput("depth_layers and channels must be positive")
        self.values = v

    @classmethod
    def zeros(cls, resolution, channels=12, depth_layers=3, dtype=np.float32):
        return cls(np.zeros((3, depth_layers, channels, resolution, resolution), dtype=dtype))

    @classmethod
    def full(cls, resolution, value, channels=12, depth_layers=3, dtype=np.float32):
        return cls(np.full((3, depth_layers, channels, resolution, resolution), value, dtype=dtype))

    @classmethod
    def random(cls, resolution, channels=12, depth_layers=3, scale=0.1, rng=None,
               dtype=np.float32):
        rng = np.random.default_rng(rng)
        shape = (3, depth_layers, channels, resolution, resolution)
        return cls((scale * rng.standard_normal(shape)).astype(dtype))

    @property
    def depth_layers(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def resolution(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self):
        return self.values.shape

    def copy(self) -> "TriGrid":
        return TriGrid(self.values.copy())

    def astype(self, dtype) -> "TriGrid":
        return TriGrid(self.values.astype(dtype))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())


@dataclass
class PyramidTriGrid:
    """Tri-grids at strictly increasing resolutions whose features are summed."""

    levels: list = field(default_factory=list)

    def __post_init__(self):
        self.levels = [lv if isinstance(lv, TriGrid) else TriGrid(lv) for lv in self.levels]
        if not self.levels:
            raise InvalidInput("a pyramid needs at least one level")
        first = self.levels[0]
        for prev, lv in zip(self.levels, self.levels[1:]):
            if lv.resolution <= prev.resolution:
                raise InvalidInput("pyramid resolutions must be strictly increasing")
            if lv.channels != first.channels or lv.depth_layers != first.depth_layers:
                raise InvalidInput("pyramid levels must share channels and depth_layers")

    @classmethod
    def zeros(cls, resolutions=(8, 16, 32, 64, 128, 256, 512), channels=12, depth_layers=3,
              dtype=np.float32):
        return cls([TriGrid.zeros(r, channels, depth_layers, dtype) for r in resolutions])

    @classmethod
    def random(cls, resolutions, channels=12, depth_layers=3, scale=0.1, rng=None,
               dtype=np.float32):
        rng = np.random.default_rng(rng)
        return cls([TriGrid.random(r, channels, depth_layers, scale, rng, dtype)
                    for r in resolutions])

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "PyramidTriGrid":
        return cls([TriGrid(a) for a in arrays])

    @property
    def resolutions(self) -> list:
        return [lv.resolution for lv in self.levels]

    @property
    def channels(self) -> int:
        return self.levels[0].channels

    @property
    def depth_layers(self) -> int:
        return self.levels[0].depth_layers

    @property
    def arrays(self) -> list:
        """The level value arrays, in level order (these are the optimised parameters)."""
        return [lv.values for lv in self.levels]

    def __len__(self):
        return len(self.levels)

    def copy(self) -> "PyramidTriGrid":
        return PyramidTriGrid([lv.copy() for lv in self.levels])

    def astype(self, dtype) -> "PyramidTriGrid":
        return PyramidTriGrid([lv.astype(dtype) for lv in self.levels])

    def __add__(self, other: "PyramidTriGrid") -> "PyramidTriGrid":
        if self.resolutions != other.resolutions:
            raise InvalidInput("cannot add pyramids with different level resolutions")
        return PyramidTriGrid([TriGrid(a.values + b.values)
                               for a, b in zip(self.levels, other.levels)])

    def scaled(self, factor: float) -> "PyramidTriGrid":
        return PyramidTriGrid([TriGrid(lv.values * lv.values.dtype.type(factor))
                               for lv in self.levels])

    def is_finite(self) -> bool:
        return all(lv.is_finite() for lv in self.levels)


def _as_points(p) -> tuple[np.ndarray, bool]:
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise InvalidInput(f"points must have 3 components, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise InvalidInput("non-finite query point")
    return pts.reshape(-1, 3), single


def _axis_lerp(coord: np.ndarray, n: int):
    """Lower texel index and fractional weight for coordinates in [-1, 1]."""
    if n == 1:
        return np.zeros(coord.shape, dtype=np.int64), np.zeros_like(coord)
    f = (np.clip(coord, -1.0, 1.0) + 1.0) * (0.5 * (n - 1))
    i0 = np.minimum(np.floor(f).astype(np.int64), n - 2)
    return i0, f - i0


@njit(cache=True)
def _lerp1(c, n):
    if n == 1:
        return 0, 0.0
    if c < -1.0:
        c = -1.0
    elif c > 1.0:
        c = 1.0
    f = (c + 1.0) * (0.5 * (n - 1))
    i0 = min(int(np.floor(f)), n - 2)
    return i0, f - i0


@njit(cache=True)
def _footprint_kernel(pts, R, D, index, weight):
    axes = ((0, 1, 2), (0, 2, 1), (1, 2, 0))
    for i in range(pts.shape[0]):
        k = 0
        for plane in range(3):
            ua, va, na = axes[plane]
            c0, tc = _lerp1(pts[i, ua], R)
            r0, tr = _lerp1(pts[i, va], R)
            d0, td = _lerp1(pts[i, na], D)
            for dd in range(2):
                layer = min(d0 + dd, D - 1)
                wd = td if dd else 1.0 - td
                for dr in range(2):
                    wr = tr if dr else 1.0 - tr
                    for dc in range(2):
                        wc = tc if dc else 1.0 - tc
                        index[i, k] = ((plane * D + layer) * R + r0 + dr) * R + c0 + dc
                        weight[i, k] = wd * wr * wc
                        k += 1


def corner_footprint(points: np.ndarray, resolution: int, depth_layers: int):
    """Table rows and weights of the 24 interpolation corners for each point.

    Returns ``(index, weight)`` each shaped ``(N, 24)``; ``index`` addresses the
    ``(3 * D * R * R)`` rows of :func:`feature_table`.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = pts.shape[0]
    index = np.empty((n, CORNERS_PER_LEVEL), dtype=np.int64)
    weight = np.empty((n, CORNERS_PER_LEVEL), dtype=np.float64)
    _footprint_kernel(pts, int(resolution), int(depth_layers), index, weight)
    return index, weight


def interpolation_matrix(points: np.ndarray, resolution: int, depth_layers: int,
                         dtype=np.float32) -> sp.csr_matrix:
    """Sparse operator ``Q`` with ``query(points) == Q @ feature_table(grid)``."""
    index, weight = corner_footprint(points, resolution, depth_layers)
    n = index.shape[0]
    indptr = np.arange(0, n * CORNERS_PER_LEVEL + 1, CORNERS_PER_LEVEL, dtype=np.int64)
    return sp.csr_matrix((weight.ravel().astype(dtype), index.ravel(), indptr),
                         shape=(n, 3 * depth_layers * resolution * resolution))


def feature_table(grid: TriGrid, dtype=None) -> np.ndarray:
    """Grid values laid out as ``(3 * D * R * R, C)`` rows for gathering."""
    v = grid.values if dtype is None else grid.values.astype(dtype, copy=False)
    return np.ascontiguousarray(v.transpose(0, 1, 3, 4, 2)).reshape(-1, grid.channels)


def table_to_values(table_grad: np.ndarray, shape) -> np.ndarray:
    """Inverse layout of :func:`feature_table`: rows back to ``(3, D, C, R, R)``."""
    _, D, C, R, _ = shape
    return np.ascontiguousarray(table_grad.reshape(3, D, R, R, C).transpose(0, 1, 4, 2, 3))


def query_trigrid(grid: TriGrid, p) -> np.ndarray:
    """Feature vector(s) of ``grid`` at point(s) ``p`` (``(3,)`` or ``(N, 3)``)."""
    pts, single = _as_points(p)
    q = interpolation_matrix(pts, grid.resolution, grid.depth_layers, grid.values.dtype)
    out = np.asarray(q @ feature_table(grid))
    return out[0] if single else out


def query_pyramid(pyr: PyramidTriGrid, p) -> np.ndarray:
    """Channel-wise sum of :func:`query_trigrid` over all pyramid levels."""
    pts, single = _as_points(p)
    out = None
    for lv in pyr.levels:
        f = query_trigrid(lv, pts)
        out = f if out is None else out + f
    return out[0] if single else out


@dataclass
class SparseGrad:
    """Coalesced gradient entries of one level, indices into ``values.ravel()``."""

    indices: np.ndarray
    values: np.ndarray
    shape: tuple

    def todense(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.shape)), dtype=self.values.dtype)
        out[self.indices] = self.values
        return out.reshape(self.shape)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))


def query_pyramid_grad(pyr: PyramidTriGrid, p, upstream) -> list:
    """Gradient of ``<upstream, query_pyramid(pyr, p)>`` w.r.t. every level's values.

    ``p`` may be a single point with ``upstream`` of length ``channels`` or a
    batch ``(N, 3)`` with ``upstream`` shaped ``(N, channels)``; batch
    contributions are summed.  Returns one :class:`SparseGrad` per level.
    """
    pts, _ = _as_points(p)
    up = np.asarray(upstream, dtype=np.float64)
    up = up.reshape(pts.shape[0], -1) if up.ndim == 1 else up
    if up.shape != (pts.shape[0], pyr.channels):
        raise InvalidInput(f"upstream must have shape {(pts.shape[0], pyr.channels)}, got {up.shape}")
    if not np.isfinite(up).all():
        raise InvalidInput("non-finite upstream gradient")
    grads = []
    for lv in pyr.levels:
        q = interpolation_matrix(pts, lv.resolution, lv.depth_layers, np.float64)
        dense = table_to_values(np.asarray(q.T @ up), lv.shape).ravel()
        nz = np.flatnonzero(dense)
        grads.append(SparseGrad(nz, dense[nz], lv.shape))
    return grads
