import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from groundloc.geometry import Pose2, PoseOffset
from groundloc.raster import (BevGrid, FeatureMap, GridSpec, coarse_spec, crop, fine_spec, upsample_bilinear,
                              voxelize, warp)

DEG = math.pi / 180.0


def small_spec(**kw):
    return GridSpec(0.1, 2.0, 1.0, **kw)  # 10 rows x 20 cols


def brute_voxelize(points, spec):
    """Scalar per-point binning, written independently of the vectorised path."""
    h, w = spec.shape
    occ = np.zeros((spec.height_slices, h, w))
    isum = np.zeros((h, w))
    cnt = np.zeros((h, w))
    zmin, zmax = spec.height_range
    for x, y, z, i in points:
        c = math.floor((x + spec.extent_x / 2) / spec.resolution)
        r = math.floor((y + spec.extent_y / 2) / spec.resolution)
        if not (0 <= c < w and 0 <= r < h and zmin <= z < zmax):
            continue
        if spec.height_slices:
            k = min(int((z - zmin) // ((zmax - zmin) / spec.height_slices)), spec.height_slices - 1)
            occ[k, r, c] += 1
        isum[r, c] += i
        cnt[r, c] += 1
    mean = np.where(cnt > 0, isum / np.maximum(cnt, 1), 0.0)
    return np.concatenate([occ, mean[None]])


def test_presets():
    assert coarse_spec().shape == (400, 720)
    assert coarse_spec().channels == 17
    assert fine_spec().shape == (481, 961)
    assert fine_spec().channels == 1


def test_spec_rejects_misaligned_extent():
    with pytest.raises(ValueError):
        GridSpec(0.05, 1.02, 1.0)


def test_voxelize_single_center_point():
    spec = GridSpec(0.2, 1.0, 1.0, height_slices=4, height_range=(0.0, 4.0))
    g = voxelize(np.array([[0.0, 0.0, 1.5, 0.7]]), spec)
    occ = g.occupancy
    assert occ.sum() == 1 and occ[1, 2, 2] == 1
    assert g.intensity[2, 2] == pytest.approx(0.7)
    assert np.count_nonzero(g.intensity) == 1


def test_voxelize_outside_point_gives_zeros():
    spec = small_spec(height_slices=2)
    g = voxelize(np.array([[5.0, 0.0, 0.5, 0.3], [0.0, 0.0, 10.0, 0.3]]), spec)
    assert not g.data.any()


def test_voxelize_matches_brute_force_oracle(rng):
    spec = GridSpec(0.2, 4.0, 3.0, height_slices=16)
    n = 1000
    pts = np.column_stack([rng.uniform(-1.99, 1.99, n), rng.uniform(-1.49, 1.49, n),
                           rng.uniform(-0.19, 2.99, n), rng.random(n)])
    g = voxelize(pts, spec)
    assert g.occupancy.sum() == 1000
    assert np.allclose(g.data, brute_voxelize(pts, spec), atol=1e-6)


def test_voxelize_respects_grid_pose(rng):
    center = Pose2(10.0, -3.0, 0.4)
    spec = GridSpec(0.1, 2.0, 2.0, center=center)
    local = np.column_stack([rng.uniform(-0.95, 0.95, 200), rng.uniform(-0.95, 0.95, 200),
                             np.zeros(200), rng.random(200)])
    from groundloc.geometry import apply_points

    world = apply_points(center, local)
    a = voxelize(world, spec)
    b = voxelize(local, GridSpec(0.1, 2.0, 2.0))
    assert np.allclose(a.data, b.data, atol=1e-6)


def test_voxelize_rejects_bad_intensity():
    with pytest.raises(ValueError):
        voxelize(np.array([[0, 0, 0, 1.5]]), small_spec())


def test_warp_zero_is_identity(rng):
    g = BevGrid(small_spec(), rng.random((1, 10, 20)))
    assert np.array_equal(warp(g, PoseOffset()).data, g.data)


def test_warp_one_cell_shift_is_exact(rng):
    g = BevGrid(small_spec(), rng.random((1, 10, 20)))
    out = warp(g, PoseOffset(0.1, 0.0, 0.0)).data
    assert np.array_equal(out[:, :, 1:], g.data[:, :, :-1])
    assert not out[:, :, 0].any()
    out = warp(g, PoseOffset(0.0, -0.2, 0.0)).data
    assert np.array_equal(out[:, :-2], g.data[:, 2:])
    assert not out[:, -2:].any()


def smooth_field(rng, n=96, wavelength=128.0):
    # curvature <= 0.5 * (2 pi / 128)^2 per axis, so one bilinear pass errs by < 3e-4
    yy, xx = np.mgrid[0:n, 0:n]
    a, b = rng.uniform(0, 2 * math.pi, 2)
    return 0.5 + 0.5 * np.sin(2 * math.pi * xx / wavelength + a) * np.cos(2 * math.pi * yy / wavelength + b)


@pytest.mark.parametrize("deg", [-3.0, -1.5, -0.5, 0.5, 1.0, 1.5, 3.0])
def test_warp_rotation_roundtrip(rng, deg):
    f = smooth_field(rng)
    g = FeatureMap(GridSpec.from_cells(96, 96, 0.05), f)
    t = deg * DEG
    back = warp(warp(g, PoseOffset(0, 0, t)), PoseOffset(0, 0, -t)).data[0]
    assert np.abs(back - f)[5:-5, 5:-5].max() <= 1e-3


@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-0.1, 0.1),
       st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_warp_linear(dx, dy, dyaw, a, b, seed):
    r = np.random.default_rng(seed)
    spec = small_spec()
    g1, g2 = r.random((2, 10, 20)), r.random((2, 10, 20))
    off = PoseOffset(dx, dy, dyaw)
    lhs = warp(FeatureMap(spec, a * g1 + b * g2), off).data
    rhs = a * warp(FeatureMap(spec, g1), off).data + b * warp(FeatureMap(spec, g2), off).data
    assert np.allclose(lhs, rhs, atol=1e-9)


@given(st.integers(-4, 4), st.integers(-4, 4), st.integers(0, 2**31))
def test_warp_integer_translation_is_exact(cx, cy, seed):
    g = FeatureMap(small_spec(), np.random.default_rng(seed).random((1, 10, 20)))
    out = warp(g, PoseOffset(cx * 0.1, cy * 0.1, 0.0)).data[0]
    expected = np.zeros((10, 20))
    src = g.data[0]
    expected[max(cy, 0):10 + min(cy, 0), max(cx, 0):20 + min(cx, 0)] = \
        src[max(-cy, 0):10 + min(-cy, 0), max(-cx, 0):20 + min(-cx, 0)]
    assert np.array_equal(out, expected)


def test_crop_examples(rng):
    g = BevGrid(GridSpec(0.1, 2.0, 2.0), rng.random((1, 20, 20)))
    full = crop(g, (-1.0, -1.0, 1.0, 1.0))
    assert np.array_equal(full.data, g.data)
    q = crop(g, (-0.5, -0.5, 0.5, 0.5))
    assert q.shape == (10, 10)
    assert np.array_equal(q.data, g.data[:, 5:15, 5:15])
    a = crop(g, (-0.8, -0.6, 0.9, 0.7))
    # B given in A's local frame: A is centred at (0.05, 0.05)
    b_in_a = crop(a, (-0.35, -0.25, 0.15, 0.35))
    b_direct = crop(g, (-0.3, -0.2, 0.2, 0.4))
    assert np.array_equal(b_in_a.data, b_direct.data)
    assert b_in_a.spec.center.x == pytest.approx(b_direct.spec.center.x)
    assert b_in_a.spec.center.y == pytest.approx(b_direct.spec.center.y)


def test_crop_rejects_off_grid_and_outside(rng):
    g = BevGrid(GridSpec(0.1, 2.0, 2.0), rng.random((1, 20, 20)))
    with pytest.raises(ValueError):
        crop(g, (-0.55, -0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        crop(g, (-1.1, -0.5, 0.5, 0.5))


def test_upsample_examples(rng):
    g = FeatureMap(GridSpec(0.2, 1.0, 0.8), rng.random((2, 4, 5)))
    assert upsample_bilinear(g, 1) is g
    const = FeatureMap(GridSpec(0.2, 1.0, 0.8), np.full((1, 4, 5), 0.37))
    up = upsample_bilinear(const, 4)
    assert up.shape == (16, 20)
    assert np.allclose(up.data, 0.37, atol=1e-12)
    assert up.spec.resolution == pytest.approx(0.05)


def test_upsample_linear_ramp_matches_closed_form():
    h, w = 6, 7
    ii, jj = np.mgrid[0:h, 0:w]
    g = FeatureMap(GridSpec.from_cells(h, w, 0.2), 0.3 * jj - 0.7 * ii + 2.0)
    up = upsample_bilinear(g, 2).data[0]
    u = np.clip((np.arange(2 * h) + 0.5) / 2 - 0.5, 0, h - 1)
    v = np.clip((np.arange(2 * w) + 0.5) / 2 - 0.5, 0, w - 1)
    expected = 0.3 * v[None, :] - 0.7 * u[:, None] + 2.0
    assert np.abs(up - expected).max() <= 1e-6


def test_upsample_rejects_bad_factor(rng):
    g = FeatureMap(GridSpec(0.2, 1.0, 0.8), rng.random((1, 4, 5)))
    for f in (0, -1, 1.5):
        with pytest.raises(ValueError):
            upsample_bilinear(g, f)


@given(st.floats(0, 1), st.integers(1, 4), st.integers(0, 5), st.integers(0, 4))
def test_crop_then_upsample_constant(c, factor, x0, y0):
    g = FeatureMap(GridSpec(0.1, 1.0, 1.0), np.full((1, 10, 10), c))
    part = crop(g, (-0.5 + 0.1 * x0, -0.5 + 0.1 * y0, 0.5, 0.5))
    assert np.allclose(upsample_bilinear(part, factor).data, c, atol=1e-12)


@given(st.integers(0, 2**31), st.integers(1, 400))
def test_voxelize_conserves_in_bounds_count(seed, n):
    r = np.random.default_rng(seed)
    spec = GridSpec(0.2, 2.0, 2.0, height_slices=4)
    pts = np.column_stack([r.uniform(-1.5, 1.5, n), r.uniform(-1.5, 1.5, n), r.uniform(-0.5, 3.5, n), r.random(n)])
    inside = ((np.abs(pts[:, 0]) < 1.0) & (np.abs(pts[:, 1]) < 1.0)
              & (pts[:, 2] >= -0.2) & (pts[:, 2] < 3.0))
    assert voxelize(pts, spec).occupancy.sum() == inside.sum()
