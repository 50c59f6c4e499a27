"""Sampling planner surrogate: constant-curvature candidates, per-sample cost
and argmin expected-cost selection, plus open-loop rollout under pose error.

Boxes are ``(x, y, yaw, length, width)`` centred on the pose. Actor
trajectories are ``(T, 3)`` arrays of ``(x, y, yaw)`` sampled at the same
timestamps as the SDV trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import Pose2, PoseOffset, Trajectory, compose, rigid_align_trajectory
from .world import SDV_LENGTH, SDV_WIDTH, Actor, ActorSet

_TIME_TOL = 1e-9


@dataclass(frozen=True)
class PlannerConfig:
    n_candidates: int = 41
    horizon: float = 5.0
    dt: float = 0.25
    speed_profile: Union[float, Tuple[float, ...]] = 10.0
    curvature_range: Tuple[float, float] = (-0.01, 0.01)
    w_collision: float = 100.0
    w_lat_acc: float = 0.5
    w_jerk: float = 0.1
    w_progress: float = 0.02
    w_route: float = 1.0
    sdv_length: float = SDV_LENGTH
    sdv_width: float = SDV_WIDTH

    def __post_init__(self) -> None:
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if not self.horizon > 0 or not self.dt > 0:
            raise ValueError("horizon and dt must be positive")
        if self.curvature_range[1] < self.curvature_range[0]:
            raise ValueError("curvature_range must be ordered (low, high)")
        others = (self.w_lat_acc, self.w_jerk, self.w_progress, self.w_route)
        if min(others + (self.w_collision,)) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.w_collision < 10.0 * sum(others) or self.w_collision == 0:
            raise ValueError("w_collision must be at least 10x the sum of the other weights")
        if not isinstance(self.speed_profile, (int, float)):
            sp = tuple(float(v) for v in self.speed_profile)
            if len(sp) != self.n_steps + 1:
                raise ValueError(f"speed_profile needs {self.n_steps + 1} entries, got {len(sp)}")
            object.__setattr__(self, "speed_profile", sp)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def speeds(self) -> np.ndarray:
        if isinstance(self.speed_profile, tuple):
            return np.asarray(self.speed_profile, dtype=np.float64)
        return np.full(self.n_steps + 1, float(self.speed_profile))

    def scaled(self, factor: float) -> "PlannerConfig":
        """Same planner with every cost weight multiplied by ``factor``."""
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in ("w_collision", "w_lat_acc", "w_jerk", "w_progress", "w_route"):
            kw[name] = kw[name] * factor
        return PlannerConfig(**kw)


@dataclass(frozen=True)
class CostBreakdown:
    collision: float
    lateral_acceleration: float
    jerk: float
    progress: float
    route_deviation: float
    total: float


@dataclass(frozen=True)
class RolloutResult:
    executed: Trajectory
    collided: bool
    first_collision_t: Optional[float] = None


# ----------------------------------------------------------------------------
# candidates


def arc_points(curvature: float, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Local ``(x, y, heading)`` after arc length ``s`` on a constant-curvature path.

    Written with ``sinc`` so the straight-line limit is exact.
    """
    s = np.asarray(s, dtype=np.float64)
    a = curvature * s
    x = s * np.sinc(a / math.pi)
    y = s * np.sin(a / 2.0) * np.sinc(a / (2.0 * math.pi))
    return x, y, a


def sample_trajectories(start: Pose2, route=None, cfg: PlannerConfig = PlannerConfig()) -> list:
    """``cfg.n_candidates`` constant-curvature arcs from ``start``, spread evenly over the curvature range.

    ``route`` is accepted for interface symmetry with richer samplers; arcs do
    not depend on it.
    """
    lo, hi = cfg.curvature_range
    kappas = [0.5 * (lo + hi)] if cfg.n_candidates == 1 else list(np.linspace(lo, hi, cfg.n_candidates))
    times = cfg.times()
    v = cfg.speeds()
    s = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * cfg.dt)])
    out = []
    for k in kappas:
        x, y, h = arc_points(float(k), s)
        poses = tuple(compose(start, Pose2(float(a), float(b), float(c))) for a, b, c in zip(x, y, h))
        out.append(Trajectory(poses, tuple(float(t) for t in times)))
    return out


# ----------------------------------------------------------------------------
# geometry helpers


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis test for oriented rectangles ``(x, y, yaw, length, width)``.

    Broadcasts over leading dimensions; touching boxes count as overlapping.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = b[..., :2] - a[..., :2]
    sep = np.zeros(np.broadcast_shapes(a.shape[:-1], b.shape[:-1]), dtype=bool)
    for yaw in (a[..., 2], a[..., 2] + math.pi / 2, b[..., 2], b[..., 2] + math.pi / 2):
        ax, ay = np.cos(yaw), np.sin(yaw)
        dist = np.abs(d[..., 0] * ax + d[..., 1] * ay)
        ra = 0.5 * a[..., 3] * np.abs(np.cos(a[..., 2] - yaw)) + 0.5 * a[..., 4] * np.abs(np.sin(a[..., 2] - yaw))
        rb = 0.5 * b[..., 3] * np.abs(np.cos(b[..., 2] - yaw)) + 0.5 * b[..., 4] * np.abs(np.sin(b[..., 2] - yaw))
        sep |= dist > ra + rb
    return ~sep


def _sdv_boxes(tau: Trajectory, cfg: PlannerConfig) -> np.ndarray:
    st = np.array([p.as_tuple() for p in tau.poses])
    return np.column_stack([st, np.full(len(st), cfg.sdv_length), np.full(len(st), cfg.sdv_width)])


def _actor_tracks(actors) -> list:
    if isinstance(actors, ActorSet):
        return actors.ground_truth()
    out = []
    for item in actors:
        out.append((item, item.gt) if isinstance(item, Actor) else item)
    return out


def collision_times(tau: Trajectory, tracks, cfg: PlannerConfig) -> np.ndarray:
    """Boolean per timestep: does the SDV box overlap any actor box."""
    sdv = _sdv_boxes(tau, cfg)
    hit = np.zeros(len(sdv), dtype=bool)
    for actor, traj in tracks:
        traj = np.asarray(traj, dtype=np.float64)
        if traj.shape[0] != len(sdv):
            raise ValueError(f"actor horizon {traj.shape[0]} does not match trajectory horizon {len(sdv)}")
        boxes = np.column_stack([traj, np.full(len(traj), actor.length), np.full(len(traj), actor.width)])
        hit |= boxes_overlap(sdv, boxes)
    return hit


def segment_kinematics(tau: Trajectory) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-segment arc length, curvature and duration assuming each segment is a circular arc.

    The arc length follows from chord and heading change as
    ``chord * (dpsi/2) / sin(dpsi/2)``, exact for constant-curvature motion.
    """
    xy = tau.xy()
    yaw = tau.yaws()
    dt = np.diff(np.asarray(tau.times))
    chord = np.hypot(*np.diff(xy, axis=0).T)
    dpsi = np.angle(np.exp(1j * np.diff(yaw)))
    length = chord / np.sinc(dpsi / (2.0 * math.pi))
    kappa = np.divide(dpsi, length, out=np.zeros_like(dpsi), where=length > 0)
    return length, kappa, dt


def lateral_accel_and_jerk(tau: Trajectory) -> Tuple[float, float]:
    if len(tau) < 2:
        return 0.0, 0.0
    length, kappa, dt = segment_kinematics(tau)
    v = length / dt
    lat = float(np.max(np.abs(v * v * kappa)))
    if len(v) < 3:
        return lat, 0.0
    tm = np.asarray(tau.times)
    mid = 0.5 * (tm[1:] + tm[:-1])
    acc = np.diff(v) / np.diff(mid)
    jerk = np.diff(acc) / np.diff(0.5 * (mid[1:] + mid[:-1]))
    return lat, float(np.max(np.abs(jerk)))


def route_frame(route: np.ndarray, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Station ``s`` along a polyline route and signed lateral offset ``d`` (left positive)."""
    r = np.asarray(route, dtype=np.float64)
    p = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    if len(r) < 2:
        raise ValueError("route needs at least two points")
    seg = np.diff(r, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    rel = p[:, None, :] - r[None, :-1, :]
    t = np.einsum("nkc,kc->nk", rel, seg) / np.maximum(seg_len ** 2, 1e-300)
    # the first and last segments extend to infinity so stations stay monotone past the ends
    t_lo = np.where(np.arange(len(seg)) == 0, -np.inf, 0.0)
    t_hi = np.where(np.arange(len(seg)) == len(seg) - 1, np.inf, 1.0)
    t = np.clip(t, t_lo, t_hi)
    foot = r[None, :-1, :] + t[..., None] * seg[None]
    dist = np.hypot(*(p[:, None, :] - foot).transpose(2, 0, 1))
    k = np.argmin(dist, axis=1)
    n = np.arange(len(p))
    s = cum[k] + t[n, k] * seg_len[k]
    cross = seg[k, 0] * rel[n, k, 1] - seg[k, 1] * rel[n, k, 0]
    d = np.sign(cross) * dist[n, k]
    return s, d


# ----------------------------------------------------------------------------
# cost and selection


def _fixed_terms(tau: Trajectory, route: np.ndarray, cfg: PlannerConfig):
    """Sample-independent cost parts and their weighted sum."""
    lat, jerk = lateral_accel_and_jerk(tau)
    s, d = route_frame(route, tau.xy())
    progress = -float(s[-1] - s[0])
    dev = float(np.mean(np.abs(d)))
    fixed = cfg.w_lat_acc * lat + cfg.w_jerk * jerk + cfg.w_progress * progress + cfg.w_route * dev
    return lat, jerk, progress, dev, fixed


def cost(tau: Trajectory, actor_sample, route: np.ndarray, cfg: PlannerConfig = PlannerConfig()) -> CostBreakdown:
    """Cost of ``tau`` against one joint forecast sample.

    ``actor_sample`` is a list of ``(Actor, (T, 3) trajectory)`` pairs, as
    returned by ``ActorSet.sample``.
    """
    coll = float(collision_times(tau, _actor_tracks(actor_sample), cfg).any())
    lat, jerk, progress, dev, fixed = _fixed_terms(tau, route, cfg)
    return CostBreakdown(coll, lat, jerk, progress, dev, cfg.w_collision * coll + fixed)


def sample_collisions(candidates: Sequence[Trajectory], samples: Sequence, cfg: PlannerConfig) -> np.ndarray:
    """``[n_candidates, n_samples]`` collision indicators, vectorised over candidates, samples and time."""
    sdv = np.stack([_sdv_boxes(t, cfg) for t in candidates])[:, None]  # C, 1, T, 5
    n_t = sdv.shape[2]
    tracks = [_actor_tracks(smp) for smp in samples]
    hit = np.zeros((len(candidates), len(samples)), dtype=bool)
    for a in range(len(tracks[0])):
        actor = tracks[0][a][0]
        traj = np.stack([np.asarray(tr[a][1], dtype=np.float64) for tr in tracks])  # S, T, 3
        if traj.shape[1] != n_t:
            raise ValueError(f"actor horizon {traj.shape[1]} does not match trajectory horizon {n_t}")
        dims = np.broadcast_to([actor.length, actor.width], traj.shape[:2] + (2,))
        boxes = np.concatenate([traj, dims], axis=-1)[None]  # 1, S, T, 5
        hit |= boxes_overlap(sdv, boxes).any(axis=-1)
    return hit


def expected_costs(candidates: Sequence[Trajectory], samples: Sequence, route: np.ndarray,
                   cfg: PlannerConfig = PlannerConfig()) -> np.ndarray:
    """Sum over forecast samples of each candidate's total cost, accumulated in sample order."""
    if not samples:
        raise ValueError("need at least one forecast sample")
    coll = sample_collisions(candidates, samples, cfg)
    totals = np.zeros(len(candidates))
    for c, tau in enumerate(candidates):
        fixed = _fixed_terms(tau, route, cfg)[4]
        acc = 0.0
        for k in range(len(samples)):
            acc += cfg.w_collision * float(coll[c, k]) + fixed
        totals[c] = acc
    return totals


def path_curvature(tau: Trajectory) -> float:
    if len(tau) < 2:
        return 0.0
    _, kappa, _ = segment_kinematics(tau)
    return float(kappa[0])


def select_index(totals: Sequence[float], curvatures: Sequence[float]) -> int:
    """Index of the minimum total; ties go to the smallest ``|curvature|``, then to list order."""
    totals = list(totals)
    if not totals:
        raise ValueError("need at least one candidate")
    return min(range(len(totals)), key=lambda i: (totals[i], abs(curvatures[i]), i))


def select_plan(candidates: Sequence[Trajectory], forecast_samples: Sequence, route: np.ndarray,
                cfg: PlannerConfig = PlannerConfig()) -> Trajectory:
    """Candidate with the minimum summed cost over all forecast samples."""
    if len(candidates) == 1:
        return candidates[0]
    totals = expected_costs(candidates, forecast_samples, route, cfg)
    return candidates[select_index(totals, [path_curvature(t) for t in candidates])]


def forecast_samples(actors: ActorSet) -> list:
    return [actors.sample(s) for s in range(actors.n_samples)]


# ----------------------------------------------------------------------------
# rollout


def truncate(tau: Trajectory, horizon: float) -> Trajectory:
    t0 = tau.times[0]
    keep = [i for i, t in enumerate(tau.times) if t - t0 <= horizon + _TIME_TOL]
    return Trajectory(tuple(tau.poses[i] for i in keep), tuple(tau.times[i] for i in keep))


def rollout_open_loop(plan: Trajectory, pose_error: PoseOffset, actors, horizon: float = 5.0,
                      cfg: PlannerConfig = PlannerConfig()) -> RolloutResult:
    """Drive ``plan`` from the true start and check it against the actors' real trajectories.

    ``actors`` is an ``ActorSet`` (its ground truth is used), a sequence of
    ``Actor`` or a sequence of ``(Actor, trajectory)`` pairs.
    """
    executed = truncate(rigid_align_trajectory(plan, pose_error), horizon)
    tracks = [(a, np.asarray(tr)[:len(executed)]) for a, tr in _actor_tracks(actors)]
    hit = collision_times(executed, tracks, cfg)
    if hit.any():
        i = int(np.argmax(hit))
        return RolloutResult(executed, True, float(executed.times[i] - executed.times[0]))
    return RolloutResult(executed, False, None)
