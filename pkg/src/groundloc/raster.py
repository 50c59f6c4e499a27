"""Bird's-eye-view rasters: voxelization, rigid warp, crop and bilinear upsampling.

A raster stores ``data[channel, row, col]``; rows run along the grid's +y
axis and columns along +x. The grid frame is centred on ``spec.center``,
so the metric position of cell ``(i, j)`` in the parent frame is
``apply(center, ((j - (W-1)/2) * res, (i - (H-1)/2) * res))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np

from ._backend import kernels
from .geometry import IDENTITY, Pose2, PoseOffset, apply, apply_points, inverse

_ALIGN_TOL = 1e-6

# Coarse (perception) and fine (localization) raster presets.
COARSE_RESOLUTION = 0.20
FINE_RESOLUTION = 0.05
HEIGHT_RANGE = (-0.2, 3.0)
COARSE_HEIGHT_SLICES = 16


def _cells(extent: float, res: float, what: str) -> int:
    n = extent / res
    k = int(round(n))
    if k <= 0 or abs(n - k) > _ALIGN_TOL * max(1.0, n):
        raise ValueError(f"{what} {extent!r} is not a positive multiple of resolution {res!r}")
    return k


@dataclass(frozen=True)
class GridSpec:
    resolution: float
    extent_x: float
    extent_y: float
    height_slices: int = 0
    height_range: Tuple[float, float] = HEIGHT_RANGE
    center: Pose2 = IDENTITY

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.height_slices < 0:
            raise ValueError("height_slices must be >= 0")
        if self.height_range[1] <= self.height_range[0]:
            raise ValueError("height_range must be increasing")
        _cells(self.extent_x, self.resolution, "extent_x")
        _cells(self.extent_y, self.resolution, "extent_y")

    @classmethod
    def from_cells(cls, rows: int, cols: int, resolution: float, **kw) -> "GridSpec":
        return cls(resolution, cols * resolution, rows * resolution, **kw)

    @property
    def cols(self) -> int:
        return _cells(self.extent_x, self.resolution, "extent_x")

    @property
    def rows(self) -> int:
        return _cells(self.extent_y, self.resolution, "extent_y")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def channels(self) -> int:
        return self.height_slices + 1

    def local_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Grid-local metric x of every column and y of every row."""
        xs = (np.arange(self.cols) - (self.cols - 1) / 2.0) * self.resolution
        ys = (np.arange(self.rows) - (self.rows - 1) / 2.0) * self.resolution
        return xs, ys


def coarse_spec(extent_x: float = 144.0, extent_y: float = 80.0, center: Pose2 = IDENTITY) -> GridSpec:
    return GridSpec(COARSE_RESOLUTION, extent_x, extent_y, COARSE_HEIGHT_SLICES, HEIGHT_RANGE, center)


def fine_spec(extent_x: float = 48.05, extent_y: float = 24.05, center: Pose2 = IDENTITY) -> GridSpec:
    return GridSpec(FINE_RESOLUTION, extent_x, extent_y, 0, HEIGHT_RANGE, center)


@dataclass(frozen=True, eq=False)
class Raster:
    spec: GridSpec
    data: np.ndarray = field(repr=False)

    dtype = np.float64

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=self.dtype)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[1:] != self.spec.shape:
            raise ValueError(f"data shape {data.shape} does not match grid {self.spec.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.spec.shape


class BevGrid(Raster):
    """LiDAR raster: ``height_slices`` occupancy channels followed by one intensity channel."""

    dtype = np.float32

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.channels != self.spec.channels:
            raise ValueError(f"expected {self.spec.channels} channels, got {self.channels}")

    @property
    def intensity(self) -> np.ndarray:
        return self.data[-1]

    @property
    def occupancy(self) -> np.ndarray:
        return self.data[:-1]


class FeatureMap(Raster):
    """Dense D-channel embedding aligned with the raster it was computed from."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")


def voxelize(points: np.ndarray, spec: GridSpec) -> BevGrid:
    """Bin ``(x, y, z, intensity)`` points into a BEV grid.

    Points are given in the grid's parent frame. Each in-bounds point adds one
    count to the occupancy slice holding its z; the last channel holds the mean
    intensity per column (0 where empty). Points outside the x/y extent or the
    height range are ignored.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite values")
    if pts.size and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
        raise ValueError("intensities must lie in [0, 1]")
    h, w = spec.shape
    if spec.center != IDENTITY:
        pts = apply_points(inverse(spec.center), pts)
    res = spec.resolution
    col = np.floor((pts[:, 0] + spec.extent_x / 2.0) / res)
    row = np.floor((pts[:, 1] + spec.extent_y / 2.0) / res)
    zmin, zmax = spec.height_range
    ok = (col >= 0) & (col < w) & (row >= 0) & (row < h) & (pts[:, 2] >= zmin) & (pts[:, 2] < zmax)
    if spec.height_slices:
        dz = (zmax - zmin) / spec.height_slices
        sl = np.minimum(np.floor((pts[:, 2] - zmin) / dz), spec.height_slices - 1)
    else:
        sl = np.full(len(pts), -1.0)
    occ, isum, count = kernels.voxel_bin(col[ok].astype(np.int64), row[ok].astype(np.int64),
                                         sl[ok].astype(np.int64), pts[ok, 3], h, w, spec.height_slices)
    mean = np.divide(isum, count, out=np.zeros_like(isum), where=count > 0)
    np.clip(mean, 0.0, 1.0, out=mean)
    return BevGrid(spec, np.concatenate([occ, mean[None]], axis=0))


def to_cells(metres: float, res: float) -> float:
    """Metric length in cells, snapped to the nearest integer when within float noise of it."""
    c = metres / res
    r = round(c)
    return float(r) if abs(c - r) < 1e-9 * max(1.0, abs(c)) else c


def warp(grid: Raster, offset: PoseOffset) -> Raster:
    """Resample ``grid`` under a rigid motion about its metric centre.

    The content is rotated by ``offset.dyaw`` then translated by
    ``(dx, dy)``; bilinear interpolation, zero outside the source.
    """
    if offset.dx == 0.0 and offset.dy == 0.0 and offset.dyaw == 0.0:
        return grid
    res = grid.spec.resolution
    out = kernels.warp(grid.data.astype(np.float64), math.cos(offset.dyaw), math.sin(offset.dyaw),
                       to_cells(offset.dx, res), to_cells(offset.dy, res))
    return replace(grid, data=out)


def crop(grid: Raster, region: Tuple[float, float, float, float]) -> Raster:
    """Cut out ``(x_min, y_min, x_max, y_max)`` given in grid-local metres.

    The region must lie inside the grid and on cell boundaries.
    """
    spec = grid.spec
    x0, y0, x1, y1 = (float(v) for v in region)
    res = spec.resolution
    edges = []
    for v, half, n in ((x0, spec.extent_x / 2, spec.cols), (x1, spec.extent_x / 2, spec.cols),
                       (y0, spec.extent_y / 2, spec.rows), (y1, spec.extent_y / 2, spec.rows)):
        k = (v + half) / res
        kr = int(round(k))
        if abs(k - kr) > _ALIGN_TOL * max(1.0, abs(k)):
            raise ValueError(f"crop edge {v} is not on a cell boundary")
        if kr < 0 or kr > n:
            raise ValueError(f"crop edge {v} lies outside the grid extent")
        edges.append(kr)
    c0, c1, r0, r1 = edges
    if c1 <= c0 or r1 <= r0:
        raise ValueError("empty crop region")
    center = apply(spec.center, ((x0 + x1) / 2.0, (y0 + y1) / 2.0))
    new_spec = replace(spec, extent_x=(c1 - c0) * res, extent_y=(r1 - r0) * res,
                       center=Pose2(center[0], center[1], spec.center.yaw))
    return replace(grid, spec=new_spec, data=grid.data[:, r0:r1, c0:c1])


def interp_matrix(n_src: int, positions: np.ndarray) -> np.ndarray:
    """Dense 1-D linear interpolation matrix with edge clamping.

    Row ``k`` holds the weights that sample a length-``n_src`` signal at
    fractional index ``positions[k]``.
    """
    pos = np.clip(np.asarray(positions, np.float64), 0.0, n_src - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(n_src - 2, 0))
    frac = pos - i0
    i1 = np.minimum(i0 + 1, n_src - 1)
    m = np.zeros((len(pos), n_src))
    k = np.arange(len(pos))
    np.add.at(m, (k, i0), 1.0 - frac)
    np.add.at(m, (k, i1), frac)
    return m


def resample_clamped(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Separable bilinear sampling of ``data[C, H, W]`` at fractional row/col axes, clamping at edges."""
    ar = interp_matrix(data.shape[1], rows)
    ac = interp_matrix(data.shape[2], cols)
    return np.einsum("ih,chw,jw->cij", ar, data, ac, optimize=True)


def resample_to(grid: Raster, target: GridSpec) -> Raster:
    """Bilinearly sample ``grid`` at the cell centres of an axis-aligned ``target`` spec."""
    src = grid.spec
    if abs(target.center.yaw - src.center.yaw) > 1e-12:
        raise ValueError("resample_to needs grids with the same orientation")
    rel = apply(inverse(src.center), (target.center.x, target.center.y))
    xs, ys = target.local_centers()
    cols = (xs + rel[0]) / src.resolution + (src.cols - 1) / 2.0
    rows = (ys + rel[1]) / src.resolution + (src.rows - 1) / 2.0
    data = resample_clamped(np.asarray(grid.data, np.float64), rows, cols)
    return replace(grid, spec=replace(target, height_slices=src.height_slices,
                                      height_range=src.height_range), data=data)


def upsample_bilinear(grid: Raster, factor: int) -> Raster:
    """Upsample by an integer factor with centre-aligned bilinear interpolation and edge clamping."""
    if int(factor) != factor or factor < 1:
        raise ValueError("factor must be a positive integer")
    factor = int(factor)
    if factor == 1:
        return grid
    spec = grid.spec
    h, w = spec.shape
    rows = (np.arange(h * factor) + 0.5) / factor - 0.5
    cols = (np.arange(w * factor) + 0.5) / factor - 0.5
    data = resample_clamped(np.asarray(grid.data, np.float64), rows, cols)
    new_spec = replace(spec, resolution=spec.resolution / factor)
    return replace(grid, spec=new_spec, data=data)
