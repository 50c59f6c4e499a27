"""Exhaustive 3-DoF pose matching of an online embedding against a map embedding.

Every candidate offset ``(dx, dy, dyaw)`` is scored by the dot product of the
warped online embedding with the map embedding. Two interchangeable paths
compute the same score volume: :func:`score_direct` evaluates each candidate
independently, :func:`score_fft` rotates the online embedding once per yaw
and obtains all translations from one FFT cross-correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import fft as sfft

from ._backend import kernels
from .embed import ConvStack, Fusion, forward, fuse_multires, identity_embed
from .geometry import Pose2, PoseOffset, compose
from .raster import BevGrid, FeatureMap, GridSpec, coarse_spec, fine_spec, voxelize
from .world import IntensityMap

DEG = math.pi / 180.0
# tie-break weighting: one degree of yaw counts as half a metre
YAW_METRES_PER_DEG = 0.5


def _check_axis(vals: np.ndarray, name: str) -> np.ndarray:
    vals = np.asarray(vals, dtype=np.float64)
    if vals.ndim != 1 or vals.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D list")
    if not np.any(vals == 0.0):
        raise ValueError(f"{name} must contain 0")
    if not np.allclose(vals, -vals[::-1], atol=1e-12):
        raise ValueError(f"{name} must be symmetric about 0")
    if vals.size > 1:
        steps = np.diff(vals)
        if steps.min() <= 0 or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError(f"{name} must be uniformly spaced and increasing")
    return vals


@dataclass(frozen=True, eq=False)
class OffsetGrid:
    x_offsets: np.ndarray
    y_offsets: np.ndarray
    yaw_offsets: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x_offsets", _check_axis(self.x_offsets, "x_offsets"))
        object.__setattr__(self, "y_offsets", _check_axis(self.y_offsets, "y_offsets"))
        object.__setattr__(self, "yaw_offsets", _check_axis(self.yaw_offsets, "yaw_offsets"))

    @classmethod
    def symmetric(cls, max_trans: float, trans_step: float, max_yaw: float, yaw_step: float) -> "OffsetGrid":
        nt = int(round(max_trans / trans_step))
        ny = int(round(max_yaw / yaw_step)) if yaw_step > 0 else 0
        t = np.arange(-nt, nt + 1) * trans_step
        y = np.arange(-ny, ny + 1) * yaw_step
        return cls(t, t.copy(), y)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (len(self.yaw_offsets), len(self.y_offsets), len(self.x_offsets))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def _step(self, vals: np.ndarray) -> float:
        return float(vals[1] - vals[0]) if vals.size > 1 else 0.0

    @property
    def steps(self) -> Tuple[float, float, float]:
        return (self._step(self.x_offsets), self._step(self.y_offsets), self._step(self.yaw_offsets))

    def offset_at(self, k: int, i: int, j: int) -> PoseOffset:
        return PoseOffset(self.x_offsets[j], self.y_offsets[i], self.yaw_offsets[k])

    def envelope(self) -> Tuple[float, float, float]:
        return (float(self.x_offsets[-1]), float(self.y_offsets[-1]), float(self.yaw_offsets[-1]))

    def contains(self, off: PoseOffset, tol: float = 1e-9) -> bool:
        ex, ey, eyaw = self.envelope()
        sx, sy, syaw = self.steps
        return (abs(off.dx) <= ex + sx / 2 + tol and abs(off.dy) <= ey + sy / 2 + tol
                and abs(off.dyaw) <= eyaw + syaw / 2 + tol)

    def nearest_index(self, off: PoseOffset) -> Tuple[int, int, int]:
        """Per-axis nearest grid cell ``(k, i, j)``; raises if outside the envelope."""
        if not self.contains(off):
            raise ValueError(f"offset {off} lies outside the search envelope")
        out = []
        for v, axis in ((off.dyaw, self.yaw_offsets), (off.dy, self.y_offsets), (off.dx, self.x_offsets)):
            if axis.size == 1:
                out.append(0)
                continue
            step = axis[1] - axis[0]
            # round half away from zero so that snapping is symmetric
            q = v / step
            n = int(math.floor(abs(q) + 0.5 + 1e-12)) * (1 if q >= 0 else -1)
            out.append(min(max(n + axis.size // 2, 0), axis.size - 1))
        return tuple(out)

    def snap(self, off: PoseOffset) -> PoseOffset:
        return self.offset_at(*self.nearest_index(off))

    def translation_cells(self, resolution: float) -> Tuple[np.ndarray, np.ndarray]:
        """Integer cell shifts of the x and y offsets at an embedding resolution."""
        out = []
        for vals in (self.x_offsets, self.y_offsets):
            c = vals / resolution
            r = np.round(c)
            if not np.allclose(c, r, atol=1e-6):
                raise ValueError("translation offsets must be whole multiples of the embedding resolution")
            out.append(r.astype(np.int64))
        return out[0], out[1]


def default_offset_grid() -> OffsetGrid:
    """+-0.5 m in 5 cm steps for x and y, +-1.5 deg in 0.5 deg steps for yaw (21 x 21 x 7)."""
    t = np.round(np.arange(-10, 11) * 0.05, 10)
    return OffsetGrid(t, t.copy(), np.arange(-3, 4) * 0.5 * DEG)


@dataclass(frozen=True, eq=False)
class ScoreVolume:
    scores: np.ndarray  # (yaw, y, x)
    grid: OffsetGrid

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=np.float64)
        if s.shape != self.grid.shape:
            raise ValueError(f"score shape {s.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", s)


@dataclass(frozen=True, eq=False)
class ProbVolume:
    probs: np.ndarray
    grid: OffsetGrid

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != self.grid.shape:
            raise ValueError("probability shape does not match grid")
        if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("not a probability distribution")
        object.__setattr__(self, "probs", p)

    @property
    def scores(self) -> np.ndarray:
        # argmax_pose works on probabilities the same way as on scores
        return self.probs


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    offset: PoseOffset
    corrected_pose: Pose2
    score: float
    prob_volume: Optional[ProbVolume] = None


def _prepare(online_emb: FeatureMap, map_emb: FeatureMap, grid: OffsetGrid):
    if online_emb.channels != map_emb.channels:
        raise ValueError("online and map embeddings differ in channel count")
    res = online_emb.spec.resolution
    if abs(map_emb.spec.resolution - res) > 1e-12:
        raise ValueError("online and map embeddings differ in resolution")
    tx, ty = grid.translation_cells(res)
    h, w = online_emb.shape
    hm, wm = map_emb.shape
    need_y, need_x = int(np.abs(ty).max()), int(np.abs(tx).max())
    if (hm - h) % 2 or (wm - w) % 2 or (hm - h) // 2 < need_y or (wm - w) // 2 < need_x:
        raise ValueError(f"map embedding {hm}x{wm} must extend the {h}x{w} online footprint "
                         f"symmetrically by at least ({need_y}, {need_x}) cells")
    ca, cb = online_emb.spec.center, map_emb.spec.center
    if abs(ca.x - cb.x) > 1e-6 or abs(ca.y - cb.y) > 1e-6 or abs(ca.yaw - cb.yaw) > 1e-9:
        raise ValueError("online and map embeddings must share their centre")
    # trim surplus map border so that both paths see a canonical padding
    oy, ox = (hm - h) // 2 - need_y, (wm - w) // 2 - need_x
    m = map_emb.data[:, oy:hm - oy, ox:wm - ox]
    return online_emb.data, m, tx, ty


def score_direct(online_emb: FeatureMap, map_emb: FeatureMap, grid: OffsetGrid) -> ScoreVolume:
    """Explicit dot product per candidate over the online footprint."""
    on, m, tx, ty = _prepare(online_emb, map_emb, grid)
    yaws = grid.yaw_offsets
    total = np.zeros(grid.shape)
    for c in range(on.shape[0]):
        total += kernels.direct_scores(on[c], m[c], np.cos(yaws), np.sin(yaws), tx, ty)
    return ScoreVolume(total, grid)


def fft_shape(map_shape: Tuple[int, int]) -> Tuple[int, int]:
    return (sfft.next_fast_len(map_shape[0], real=True), sfft.next_fast_len(map_shape[1], real=True))


def rotate_stack(on: np.ndarray, yaws: np.ndarray) -> np.ndarray:
    """Online embedding rotated in its own frame for every yaw: ``[K, C, H, W]``."""
    return np.stack([kernels.warp(on, math.cos(a), math.sin(a), 0.0, 0.0) for a in yaws])


def lag_dft_matrices(shape: Tuple[int, int], lag_rows: np.ndarray, lag_cols: np.ndarray):
    """Inverse-DFT rows and Hermitian-weighted columns that evaluate an ``irfft2`` at chosen lags only."""
    hs, ws = shape
    wr = ws // 2 + 1
    u = np.arange(hs)
    v = np.arange(wr)
    ey = np.exp(2j * math.pi * (np.outer(lag_rows, u) % hs) / hs)
    weight = np.full(wr, 2.0)
    weight[0] = 1.0
    if ws % 2 == 0:
        weight[-1] = 1.0
    ex = np.exp(2j * math.pi * (np.outer(v, lag_cols) % ws) / ws) * weight[:, None]
    return ey, ex / (hs * ws)


def correlate_fft(rot: np.ndarray, m: np.ndarray, tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    """``out[k, a, b] = sum_q rot[k](q) * m(q + pad + (ty[a], tx[b]))`` via zero-padded FFTs.

    Only the searched lags are needed, so the inverse transform is evaluated
    at those lags with two small matrix products instead of a full ``irfft2``.
    """
    k, c, h, w = rot.shape
    _, hm, wm = m.shape
    py, px = (hm - h) // 2, (wm - w) // 2
    shape = fft_shape((hm, wm))
    mf = sfft.rfft2(m, s=shape)
    rf = sfft.rfft2(rot, s=shape)
    cross = np.conj(rf[:, 0]) * mf[0]
    for ch in range(1, c):
        cross += np.conj(rf[:, ch]) * mf[ch]
    ey, ex = lag_dft_matrices(shape, py + np.asarray(ty), px + np.asarray(tx))
    return np.real(ey[None] @ cross @ ex[None])


def score_fft(online_emb: FeatureMap, map_emb: FeatureMap, grid: OffsetGrid) -> ScoreVolume:
    """One FFT cross-correlation per yaw candidate; matches :func:`score_direct`."""
    on, m, tx, ty = _prepare(online_emb, map_emb, grid)
    rot = rotate_stack(on, grid.yaw_offsets)
    return ScoreVolume(correlate_fft(rot, m, tx, ty), grid)


def relative_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b|`` scaled by the largest magnitude of the reference ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.abs(b).max()), 1e-300)
    return float(np.abs(a - b).max()) / scale


def softmax(vol: ScoreVolume) -> ProbVolume:
    s = vol.scores
    e = np.exp(s - s.max())
    return ProbVolume(e / e.sum(), vol.grid)


def _tie_key(grid: OffsetGrid, k: int, i: int, j: int):
    dx, dy, dyaw = grid.x_offsets[j], grid.y_offsets[i], grid.yaw_offsets[k]
    yaw_m = math.degrees(dyaw) * YAW_METRES_PER_DEG
    return (dx * dx + dy * dy + yaw_m * yaw_m, k, i, j)


def argmax_pose(vol, grid: Optional[OffsetGrid] = None) -> PoseOffset:
    """Grid offset with the highest score.

    Exact ties go to the smallest offset norm (1 deg of yaw weighted as
    0.5 m), then to the lexicographically smallest ``(yaw, y, x)``.
    """
    grid = vol.grid if grid is None else grid
    s = vol.scores
    ties = np.argwhere(s == s.max())
    if len(ties) == 1:
        return grid.offset_at(*ties[0])
    best = min((_tie_key(grid, *map(int, t)) for t in ties))
    return grid.offset_at(*best[1:])


# ----------------------------------------------------------------------------
# end-to-end localization


@dataclass(frozen=True)
class LocalizerConfig:
    fine_extent: Tuple[float, float] = (48.05, 24.05)
    coarse_extent: Tuple[float, float] = (144.0, 80.0)
    grid: OffsetGrid = field(default_factory=default_offset_grid)

    def fine_spec(self) -> GridSpec:
        return fine_spec(*self.fine_extent)

    def coarse_spec(self) -> GridSpec:
        return coarse_spec(*self.coarse_extent)

    def map_padding(self) -> Tuple[int, int]:
        """Extra map cells on each side needed for the translation search: (rows, cols)."""
        tx, ty = self.grid.translation_cells(self.fine_spec().resolution)
        return int(np.abs(ty).max()), int(np.abs(tx).max())


DESK_CONFIG = LocalizerConfig(fine_extent=(24.05, 24.05), coarse_extent=(32.0, 32.0))


@dataclass(eq=False)
class Nets:
    """Embedding functions; ``None`` for ``f``/``g`` selects the identity embedding."""

    f: Optional[ConvStack] = None
    g: Optional[ConvStack] = None
    base: Optional[ConvStack] = None
    fusion: Optional[Fusion] = None

    @property
    def uses_fusion(self) -> bool:
        return self.base is not None and self.fusion is not None


def map_region(m: IntensityMap, prior: Pose2, spec: GridSpec, pad: Tuple[int, int]) -> BevGrid:
    """Map intensities resampled into the prior's frame on ``spec``'s lattice grown by ``pad`` cells."""
    rows, cols = spec.rows + 2 * pad[0], spec.cols + 2 * pad[1]
    out_spec = GridSpec.from_cells(rows, cols, spec.resolution, height_range=spec.height_range)
    xs, ys = out_spec.local_centers()
    gx, gy = np.meshgrid(xs, ys)
    c, s = math.cos(prior.yaw), math.sin(prior.yaw)
    wx = prior.x + c * gx - s * gy
    wy = prior.y + s * gx + c * gy
    vals = m.lookup(np.column_stack([wx.ravel(), wy.ravel()])).reshape(rows, cols)
    return BevGrid(out_spec, np.clip(vals, 0.0, 1.0)[None])


def embed_online(sweep: np.ndarray, nets: Nets, cfg: LocalizerConfig) -> FeatureMap:
    fine = voxelize(sweep, cfg.fine_spec())
    emb = identity_embed(fine) if nets.g is None else forward(nets.g, fine)
    if nets.uses_fusion:
        coarse = voxelize(sweep, cfg.coarse_spec())
        emb = fuse_multires(emb, forward(nets.base, coarse), nets.fusion)
    return emb


def embed_map(m: IntensityMap, prior: Pose2, nets: Nets, cfg: LocalizerConfig) -> FeatureMap:
    """Map embedding around ``prior``; a pure function of map, prior and ``f``."""
    region = map_region(m, prior, cfg.fine_spec(), cfg.map_padding())
    return identity_embed(region) if nets.f is None else forward(nets.f, region)


def localize(sweep: np.ndarray, m: IntensityMap, prior: Pose2, nets: Optional[Nets] = None,
             cfg: LocalizerConfig = DESK_CONFIG, keep_probs: bool = False,
             map_emb: Optional[FeatureMap] = None) -> PoseEstimate:
    """Correct ``prior`` by matching the sweep against the map over ``cfg.grid``."""
    nets = Nets() if nets is None else nets
    if not m.contains(prior.x, prior.y):
        raise ValueError(f"prior ({prior.x:.2f}, {prior.y:.2f}) lies outside the map")
    online = embed_online(sweep, nets, cfg)
    if map_emb is None:
        map_emb = embed_map(m, prior, nets, cfg)
    vol = score_fft(online, map_emb, cfg.grid)
    off = argmax_pose(vol)
    k, i, j = cfg.grid.nearest_index(off)
    return PoseEstimate(off, compose(prior, off.as_pose()), float(vol.scores[k, i, j]),
                        softmax(vol) if keep_probs else None)
