"""SE(2) pose algebra and rigid trajectory alignment.

Conventions: a :class:`Pose2` ``T`` maps a point ``q`` expressed in its own
(vehicle) frame to the parent (map) frame via ``apply(T, q) = R(yaw) q + t``.
All yaw values live in the half-open interval ``(-pi, pi]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Reduce an angle to ``(-pi, pi]``.

    Raises
    ------
    ValueError
        If ``theta`` is NaN or infinite.
    """
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    r = math.remainder(theta, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.yaw)


@dataclass(frozen=True)
class PoseOffset:
    """A 3-DoF correction ``(dx, dy, dyaw)`` relative to a reference pose."""

    dx: float = 0.0
    dy: float = 0.0
    dyaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))
        object.__setattr__(self, "dyaw", wrap_angle(self.dyaw))

    def as_pose(self) -> Pose2:
        return Pose2(self.dx, self.dy, self.dyaw)

    @classmethod
    def from_pose(cls, p: Pose2) -> "PoseOffset":
        return cls(p.x, p.y, p.yaw)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.dx, self.dy, self.dyaw)


IDENTITY = Pose2()


def _as_pose(p) -> Pose2:
    return p.as_pose() if isinstance(p, PoseOffset) else p


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Return ``a * b``: first ``b`` expressed in ``a``'s frame."""
    a = _as_pose(a)
    b = _as_pose(b)
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def inverse(p: Pose2) -> Pose2:
    p = _as_pose(p)
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose2(-(c * p.x + s * p.y), s * p.x - c * p.y, -p.yaw)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose of ``b`` seen from ``a`` (``compose(a, between(a, b)) == b``)."""
    return compose(inverse(a), b)


def apply(p: Pose2, pt: Sequence[float]) -> Tuple[float, float]:
    """Rotate ``pt`` by ``p.yaw`` then translate by ``(p.x, p.y)``."""
    p = _as_pose(p)
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    x, y = float(pt[0]), float(pt[1])
    return (p.x + c * x - s * y, p.y + s * x + c * y)


def apply_points(p: Pose2, pts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`apply` for an ``(N, 2)`` (or wider) array; extra columns pass through."""
    p = _as_pose(p)
    pts = np.asarray(pts, dtype=np.float64)
    out = pts.copy()
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    out[:, 0] = p.x + c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = p.y + s * pts[:, 0] + c * pts[:, 1]
    return out


@dataclass(frozen=True)
class Trajectory:
    """Timed sequence of poses with strictly increasing timestamps."""

    poses: Tuple[Pose2, ...]
    times: Tuple[float, ...]

    def __post_init__(self) -> None:
        poses = tuple(self.poses)
        times = tuple(float(t) for t in self.times)
        if not poses:
            raise ValueError("trajectory needs at least one waypoint")
        if len(poses) != len(times):
            raise ValueError("poses and times differ in length")
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "times", times)

    @classmethod
    def from_waypoints(cls, waypoints: Iterable[Tuple[Pose2, float]]) -> "Trajectory":
        wp = list(waypoints)
        return cls(tuple(p for p, _ in wp), tuple(t for _, t in wp))

    @property
    def waypoints(self) -> list:
        return list(zip(self.poses, self.times))

    def __len__(self) -> int:
        return len(self.poses)

    def xy(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.poses])

    def yaws(self) -> np.ndarray:
        return np.array([p.yaw for p in self.poses])

    def transformed(self, motion: Pose2) -> "Trajectory":
        return Trajectory(tuple(compose(motion, p) for p in self.poses), self.times)


def rigid_align_trajectory(planned: Trajectory, pose_error: PoseOffset) -> Trajectory:
    """Trajectory actually driven when a plan made from a wrong pose is executed.

    ``pose_error`` is the error of the believed start pose expressed in the true
    vehicle frame, i.e. ``believed = compose(true, pose_error)``. The whole plan
    is moved by the single rigid motion taking the believed start onto the true
    start, so yaw error pivots about the first waypoint.
    """
    if pose_error.as_tuple() == (0.0, 0.0, 0.0):
        return planned
    believed = planned.poses[0]
    true_start = compose(believed, inverse(pose_error.as_pose()))
    motion = compose(true_start, inverse(believed))
    if motion == IDENTITY:
        return planned
    return planned.transformed(motion)
