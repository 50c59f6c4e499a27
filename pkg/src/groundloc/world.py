"""Procedural ground-intensity maps, LiDAR sweeps and traffic scenarios.

Everything here is a pure function of its seed so that corpora can be
regenerated bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from ._backend import kernels
from .geometry import Pose2, Trajectory, apply, apply_points, compose, inverse, wrap_angle
from .raster import FINE_RESOLUTION, BevGrid, GridSpec

# Road layout used by both the map texture and the scenario actors (metres).
LANE_WIDTH = 3.7
MARKING_WIDTH = 0.15
SDV_LENGTH = 4.8
SDV_WIDTH = 2.0


@dataclass(frozen=True)
class RoadArc:
    """Lane centreline of constant curvature starting at ``start``."""

    start: Pose2
    curvature: float
    length: float

    def local(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Arc length ``s`` and signed lateral offset ``d`` (left positive) of map points."""
        pts = np.asarray(xy, dtype=np.float64)
        k = self.curvature
        if abs(k) < 1e-9:
            loc = apply_points(inverse(self.start), pts)
            return loc[:, 0], loc[:, 1]
        r = 1.0 / abs(k)
        cx, cy = apply(self.start, (0.0, 1.0 / k))
        dxp, dyp = pts[:, 0] - cx, pts[:, 1] - cy
        dist = np.hypot(dxp, dyp)
        d = math.copysign(1.0, k) * (r - dist)
        th0 = math.atan2(self.start.y - cy, self.start.x - cx)
        dth = np.angle(np.exp(1j * (np.arctan2(dyp, dxp) - th0)))
        return math.copysign(1.0, k) * dth * r, d

    def pose_at(self, s: float, d: float = 0.0) -> Pose2:
        k = self.curvature
        if abs(k) < 1e-9:
            return compose(self.start, Pose2(s, d, 0.0))
        th = k * s
        x = math.sin(th) / k - d * math.sin(th)
        y = (1.0 - math.cos(th)) / k + d * math.cos(th)
        return compose(self.start, Pose2(x, y, th))

    def polyline(self, step: float = 1.0) -> np.ndarray:
        n = int(math.ceil(self.length / step))
        return np.array([[p.x, p.y] for p in (self.pose_at(i * step) for i in range(n + 1))])


@dataclass(frozen=True, eq=False)
class IntensityMap:
    grid: BevGrid

    def __post_init__(self) -> None:
        if self.grid.channels != 1:
            raise ValueError("intensity map must have exactly one channel")

    @property
    def spec(self) -> GridSpec:
        return self.grid.spec

    @property
    def resolution(self) -> float:
        return self.grid.spec.resolution

    @property
    def image(self) -> np.ndarray:
        return self.grid.data[0]

    def bounds(self) -> Tuple[float, float, float, float]:
        s = self.spec
        return (s.center.x - s.extent_x / 2, s.center.y - s.extent_y / 2,
                s.center.x + s.extent_x / 2, s.center.y + s.extent_y / 2)

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        x0, y0, x1, y1 = self.bounds()
        return x0 + margin <= x <= x1 - margin and y0 + margin <= y <= y1 - margin

    def to_index(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Fractional (row, col) of map-frame points."""
        x0, y0, _, _ = self.bounds()
        res = self.resolution
        xy = np.asarray(xy, dtype=np.float64)
        return (xy[:, 1] - y0) / res - 0.5, (xy[:, 0] - x0) / res - 0.5

    def lookup(self, xy: np.ndarray) -> np.ndarray:
        """Bilinear intensity at map-frame points (zero outside the map)."""
        rows, cols = self.to_index(xy)
        return kernels.bilinear_gather(self.image.astype(np.float64), rows, cols)


def _unit_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def gen_map(seed: int, width: float, height: float, *, center: Optional[Tuple[float, float]] = None,
            road: Optional[RoadArc] = None, resolution: float = FINE_RESOLUTION) -> IntensityMap:
    """Render a ground-intensity map with asphalt grain, stains and lane markings.

    Without ``road`` a straight road through the map centre is drawn with a
    seed-dependent heading.
    """
    if width <= 0 or height <= 0:
        raise ValueError("map dimensions must be positive")
    rng = np.random.default_rng(seed)
    cols = int(math.ceil(width / resolution - 1e-9))
    rows = int(math.ceil(height / resolution - 1e-9))
    cx, cy = center if center is not None else (width / 2.0, height / 2.0)
    spec = GridSpec.from_cells(rows, cols, resolution, center=Pose2(cx, cy, 0.0))
    if road is None:
        heading = rng.uniform(-math.pi, math.pi)
        start = compose(Pose2(cx, cy, heading), Pose2(-(width + height), 0.0, 0.0))
        road = RoadArc(start, 0.0, 2.0 * (width + height))

    xs, ys = spec.local_centers()
    gx, gy = np.meshgrid(xs + cx, ys + cy)
    s, d = road.local(np.column_stack([gx.ravel(), gy.ravel()]))
    s = s.reshape(rows, cols)
    d = d.reshape(rows, cols)

    on_road = (d > -LANE_WIDTH / 2 - 0.5) & (d < LANE_WIDTH * 1.5 + 0.5)
    background = 0.05 * _unit_noise(rng, (rows, cols), 60.0)
    grain = _unit_noise(rng, (rows, cols), 0.7)
    img = np.where(on_road, 0.30 + 0.07 * grain, 0.45 + 0.12 * grain) + background

    # stains and patches
    n_patches = int(width * height / 40.0)
    patches = np.zeros((rows, cols))
    for _ in range(n_patches):
        pr, pc = rng.integers(0, rows), rng.integers(0, cols)
        rad = rng.uniform(0.2, 1.5) / resolution
        r0, r1 = max(0, int(pr - rad)), min(rows, int(pr + rad) + 1)
        c0, c1 = max(0, int(pc - rad)), min(cols, int(pc + rad) + 1)
        yy, xx = np.mgrid[r0:r1, c0:c1]
        mask = (yy - pr) ** 2 + (xx - pc) ** 2 <= rad ** 2
        patches[r0:r1, c0:c1][mask] += rng.uniform(-0.15, 0.15)
    img += ndimage.gaussian_filter(patches, 1.0)

    # lane markings: solid road edges, dashed centre divider
    half_w = MARKING_WIDTH / 2.0
    edge = (np.abs(d + LANE_WIDTH / 2) < half_w) | (np.abs(d - 1.5 * LANE_WIDTH) < half_w)
    dashed = (np.abs(d - LANE_WIDTH / 2) < half_w) & (np.mod(s, 9.0) < 3.0)
    img = np.where(edge | dashed, 0.85 + 0.05 * grain, img)
    np.clip(img, 0.0, 1.0, out=img)
    return IntensityMap(BevGrid(spec, img[None].astype(np.float32)))


def age_map(m: IntensityMap, seed: int, noise_sigma: float = 0.05, n_occluders: int = 20) -> IntensityMap:
    """Degraded copy of ``m`` standing in for an outdated map: extra noise and blanked patches."""
    rng = np.random.default_rng(seed)
    img = m.image.astype(np.float64) + noise_sigma * rng.standard_normal(m.image.shape)
    rows, cols = img.shape
    for _ in range(n_occluders):
        h = int(rng.integers(5, 60))
        w = int(rng.integers(5, 60))
        r = int(rng.integers(0, max(1, rows - h)))
        c = int(rng.integers(0, max(1, cols - w)))
        img[r:r + h, c:c + w] = rng.uniform(0.2, 0.6)
    np.clip(img, 0.0, 1.0, out=img)
    return IntensityMap(BevGrid(m.spec, img[None].astype(np.float32)))


@dataclass(frozen=True)
class SensorModel:
    n_rays: int = 1024
    max_range: float = 12.0
    dropout_prob: float = 0.0
    intensity_noise_sigma: float = 0.0
    range_noise_sigma: float = 0.0
    radial_spacing: float = 0.05
    min_range: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.intensity_noise_sigma < 0 or self.range_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.n_rays < 1 or self.radial_spacing <= 0 or self.max_range <= self.min_range:
            raise ValueError("invalid ray layout")

    @property
    def samples_per_ray(self) -> int:
        return int(math.floor((self.max_range - self.min_range) / self.radial_spacing + 1e-9)) + 1


def render_sweep(m: IntensityMap, pose: Pose2, sensor: SensorModel, seed: int) -> np.ndarray:
    """Simulate a ground-return sweep taken at ``pose``.

    Returns an ``(N, 4)`` float64 array of ``(x, y, z, intensity)`` in the
    vehicle frame.
    """
    if not m.contains(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x:.2f}, {pose.y:.2f}) lies outside the map")
    rng = np.random.default_rng(seed)
    az = 2.0 * math.pi * np.arange(sensor.n_rays) / sensor.n_rays
    rad = sensor.min_range + sensor.radial_spacing * np.arange(sensor.samples_per_ray)
    rr, aa = np.meshgrid(rad, az)
    rr = rr.ravel()
    aa = aa.ravel()
    n = rr.size
    keep = rng.random(n) >= sensor.dropout_prob
    inoise = rng.standard_normal(n) * sensor.intensity_noise_sigma
    rnoise = rng.standard_normal(n) * sensor.range_noise_sigma

    local = np.column_stack([rr * np.cos(aa), rr * np.sin(aa)])
    inten = m.lookup(apply_points(pose, local))
    inten = np.clip(inten + inoise, 0.0, 1.0)
    meas = rr + rnoise
    pts = np.column_stack([meas * np.cos(aa), meas * np.sin(aa), np.zeros(n), inten])
    return pts[keep]


@dataclass(frozen=True)
class ScenarioConfig:
    speed: float = 10.0
    horizon: float = 5.0
    dt: float = 0.25
    max_route_curvature: float = 0.005
    route_margin: float = 20.0
    n_actors: int = 6
    n_samples: int = 50
    forecast_sigma: float = 0.15
    with_map: bool = True
    map_margin: float = 16.0


@dataclass(frozen=True, eq=False)
class Actor:
    length: float
    width: float
    gt: np.ndarray  # (T, 3) x, y, yaw
    forecasts: np.ndarray  # (S, T, 3)
    kind: str = "vehicle"

    @property
    def box(self) -> Tuple[float, float, float, float, float]:
        """Current box ``(x, y, length, width, heading)``."""
        x, y, yaw = self.gt[0]
        return (float(x), float(y), self.length, self.width, float(yaw))


@dataclass(frozen=True, eq=False)
class ActorSet:
    actors: Tuple[Actor, ...] = ()
    n_samples: int = 1

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("need at least one forecast sample")
        horizons = {a.gt.shape[0] for a in self.actors} | {a.forecasts.shape[1] for a in self.actors}
        if len(horizons) > 1:
            raise ValueError("all forecasts must share the horizon")
        for a in self.actors:
            if a.forecasts.shape[0] != self.n_samples:
                raise ValueError("forecast sample count mismatch")

    def __len__(self) -> int:
        return len(self.actors)

    def sample(self, s: int) -> List[Tuple[Actor, np.ndarray]]:
        """Joint forecast sample ``s``: one trajectory per actor."""
        return [(a, a.forecasts[s]) for a in self.actors]

    def ground_truth(self) -> List[Tuple[Actor, np.ndarray]]:
        return [(a, a.gt) for a in self.actors]


@dataclass(frozen=True, eq=False)
class Scenario:
    map: Optional[IntensityMap]
    sdv_gt: Trajectory
    route: np.ndarray
    actors: ActorSet
    seed: int
    road: RoadArc
    config: ScenarioConfig = field(default_factory=ScenarioConfig)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({
            "seed": self.seed,
            "gt": [[p.x, p.y, p.yaw, t] for p, t in self.sdv_gt.waypoints],
        }, sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.route, dtype=np.float64).tobytes())
        for a in self.actors.actors:
            h.update(np.ascontiguousarray(a.gt).tobytes())
            h.update(np.ascontiguousarray(a.forecasts).tobytes())
        if self.map is not None:
            h.update(self.map.image.tobytes())
        return h.hexdigest()


def _actor_track(road: RoadArc, s0: float, d: float, v: float, times: np.ndarray) -> np.ndarray:
    out = np.empty((len(times), 3))
    for i, t in enumerate(times):
        p = road.pose_at(s0 + v * t, d)
        yaw = p.yaw if v >= 0 else wrap_angle(p.yaw + math.pi)
        out[i] = (p.x, p.y, yaw)
    return out


def gen_scenario(seed: int, cfg: ScenarioConfig = ScenarioConfig()) -> Scenario:
    """Two-lane road scene: the SDV follows its lane centre, actors are parked
    cars on the right shoulder and oncoming traffic in the left lane."""
    rng = np.random.default_rng(seed)
    heading = rng.uniform(-math.pi, math.pi)
    curvature = rng.uniform(-cfg.max_route_curvature, cfg.max_route_curvature)
    length = cfg.speed * cfg.horizon + cfg.route_margin
    road = RoadArc(Pose2(0.0, 0.0, heading), curvature, length)

    n_steps = int(round(cfg.horizon / cfg.dt)) + 1
    times = np.arange(n_steps) * cfg.dt
    sdv = Trajectory(tuple(road.pose_at(cfg.speed * t) for t in times), tuple(times))
    route = road.polyline(1.0)

    actors = []
    for _ in range(cfg.n_actors):
        kind = "parked" if rng.random() < 0.6 else "oncoming"
        length_a = rng.uniform(4.2, 5.2)
        width_a = rng.uniform(1.8, 2.0)
        if kind == "parked":
            s0 = rng.uniform(12.0, cfg.speed * cfg.horizon + 5.0)
            d = -(LANE_WIDTH / 2 + 0.1 + width_a / 2)
            v = 0.0
        else:
            s0 = rng.uniform(40.0, 100.0)
            d = LANE_WIDTH + rng.uniform(-0.2, 0.2)
            v = -rng.uniform(6.0, 12.0)
        gt = _actor_track(road, s0, d, v, times)
        walk = rng.standard_normal((cfg.n_samples, n_steps, 2)) * cfg.forecast_sigma * math.sqrt(cfg.dt)
        walk[:, 0] = 0.0
        fc = np.repeat(gt[None], cfg.n_samples, axis=0)
        fc[:, :, :2] += np.cumsum(walk, axis=1)
        actors.append(Actor(length_a, width_a, gt, fc, kind))
    actor_set = ActorSet(tuple(actors), cfg.n_samples)

    imap = None
    if cfg.with_map:
        lo = np.minimum(route.min(axis=0), sdv.xy().min(axis=0)) - cfg.map_margin
        hi = np.maximum(route.max(axis=0), sdv.xy().max(axis=0)) + cfg.map_margin
        size = np.ceil(hi - lo)
        ctr = lo + size / 2.0
        imap = gen_map(int(rng.integers(0, 2**63 - 1)), float(size[0]), float(size[1]),
                       center=(float(ctr[0]), float(ctr[1])), road=road)
    return Scenario(imap, sdv, route, actor_set, seed, road, cfg)
