import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from groundloc.geometry import (IDENTITY, Pose2, PoseOffset, Trajectory, apply, compose, inverse,
                                rigid_align_trajectory, wrap_angle)

DEG = math.pi / 180.0

coords = st.floats(-100, 100, allow_nan=False)
angles = st.floats(-10, 10, allow_nan=False)
poses = st.builds(Pose2, coords, coords, angles)


def close(a: Pose2, b: Pose2, tol=1e-12):
    return (abs(a.x - b.x) <= tol and abs(a.y - b.y) <= tol
            and abs(wrap_angle(a.yaw - b.yaw)) <= tol)


def straight(length=50.0, n=11):
    xs = np.linspace(0.0, length, n)
    return Trajectory(tuple(Pose2(x, 0.0, 0.0) for x in xs), tuple(np.arange(n) * 0.5))


def test_compose_identity():
    p = Pose2(1.5, -2.0, 0.3)
    assert compose(IDENTITY, p) == p


def test_compose_quarter_turn():
    c = compose(Pose2(1, 0, 90 * DEG), Pose2(1, 0, 0))
    assert close(c, Pose2(1, 1, 90 * DEG))


def test_compose_inverse_is_identity():
    p = Pose2(3.0, -4.0, 2.5)
    assert close(compose(p, inverse(p)), IDENTITY)


@pytest.mark.parametrize("theta, expected", [(0.1, 0.1), (3 * math.pi, math.pi), (-math.pi, math.pi),
                                              (math.pi, math.pi), (-3 * math.pi / 2, math.pi / 2)])
def test_wrap_angle_examples(theta, expected):
    assert wrap_angle(theta) == pytest.approx(expected, abs=1e-12)


def test_wrap_angle_rejects_nan():
    with pytest.raises(ValueError):
        wrap_angle(float("nan"))


def test_apply_examples():
    assert apply(Pose2(0, 0, 0), (2, 3)) == (2, 3)
    x, y = apply(Pose2(1, 1, math.pi), (1, 0))
    assert x == pytest.approx(0.0, abs=1e-12) and y == pytest.approx(1.0, abs=1e-12)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory((), ())
    with pytest.raises(ValueError):
        Trajectory((IDENTITY, IDENTITY), (0.0, 0.0))
    with pytest.raises(ValueError):
        Trajectory((IDENTITY,), (0.0, 1.0))


def test_rigid_align_zero_error_is_identity():
    tau = straight()
    assert rigid_align_trajectory(tau, PoseOffset()) == tau


def test_rigid_align_yaw_error_terminal_deviation():
    # believed heading is 1.5 deg left of the truth, so the executed path drifts right
    out = rigid_align_trajectory(straight(), PoseOffset(0, 0, 1.5 * DEG))
    end = out.poses[-1]
    assert abs(end.y) == pytest.approx(50 * math.sin(1.5 * DEG), abs=1e-9)
    assert abs(end.y) == pytest.approx(1.309, abs=5e-4)
    assert (out.poses[0].x, out.poses[0].y) == (0.0, 0.0)
    assert out.poses[0].yaw == pytest.approx(-1.5 * DEG, abs=1e-15)


def test_rigid_align_pure_translation_shifts_every_waypoint():
    out = rigid_align_trajectory(straight(), PoseOffset(0.3, -0.2, 0.0))
    d = out.xy() - straight().xy()
    assert np.allclose(d, [-0.3, 0.2], atol=1e-12)


@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    assert close(compose(compose(a, b), c), compose(a, compose(b, c)), tol=1e-9)


@given(poses, st.tuples(coords, coords))
def test_apply_inverse_roundtrip(p, q):
    x, y = apply(p, apply(inverse(p), q))
    assert x == pytest.approx(q[0], abs=1e-12 * max(1, abs(p.x), abs(q[0])) * 100)
    assert y == pytest.approx(q[1], abs=1e-12 * max(1, abs(p.y), abs(q[1])) * 100)


@given(angles)
def test_wrap_idempotent_and_in_range(t):
    w = wrap_angle(t)
    assert -math.pi < w <= math.pi
    assert wrap_angle(w) == w


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-0.2, 0.2),
       st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30), angles), min_size=2, max_size=8))
def test_rigid_align_preserves_distances_and_relative_heading(dx, dy, dyaw, pts):
    tau = Trajectory(tuple(Pose2(*p) for p in pts), tuple(range(len(pts))))
    out = rigid_align_trajectory(tau, PoseOffset(dx, dy, dyaw))
    a, b = tau.xy(), out.xy()
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    assert np.allclose(da, db, atol=1e-9)
    rel_a = [wrap_angle(p.yaw - tau.poses[0].yaw) for p in tau.poses]
    rel_b = [wrap_angle(p.yaw - out.poses[0].yaw) for p in out.poses]
    assert np.allclose(np.angle(np.exp(1j * (np.array(rel_a) - rel_b))), 0, atol=1e-9)
    assert out.times == tau.times
