import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from groundloc.embed import (CONFIG_LADDER, ConvStack, Fusion, NetConfig, big_config, conv2d, conv2d_backward,
                             forward, fuse_multires, identity_embed, init, load_checkpoint, save_checkpoint,
                             tiny_config)
from groundloc.geometry import Pose2, PoseOffset
from groundloc.raster import BevGrid, FeatureMap, GridSpec, warp


def scalar_conv(x, w, b):
    """Same-padded cross-correlation, one output value at a time."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            ii, jj = i + u - p, j + v - p
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += w[o, c, u, v] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def test_netconfig_validation():
    with pytest.raises(ValueError):
        NetConfig(0, ())
    with pytest.raises(ValueError):
        NetConfig(2, (3, 1), kernel_size=2)
    with pytest.raises(ValueError):
        NetConfig(2, (0, 1))
    with pytest.raises(ValueError):
        NetConfig(2, (3,))


def test_config_ladder_shapes():
    assert tiny_config().layers == 5 and tiny_config().channels_per_layer == (8, 8, 8, 8, 1)
    big = big_config()
    assert big.layers == 11 and big.pooling_stages == 3
    widths = [CONFIG_LADDER[n]().channels_per_layer[0] for n in ("big", "large", "medium", "small")]
    assert widths == [128, 64, 16, 8]
    assert all(CONFIG_LADDER[n]().out_channels == 1 for n in CONFIG_LADDER)


def test_init_deterministic_and_scaled():
    cfg = NetConfig(3, (16, 16, 1))
    a, b, c = init(cfg, 5), init(cfg, 5), init(cfg, 6)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    big = init(NetConfig(1, (256,), in_channels=64), 0)
    assert big.weights[0].std() == pytest.approx(np.sqrt(2.0 / (64 * 9)), rel=0.02)
    assert not any(bb.any() for bb in a.biases)


def test_one_by_one_identity_net(rng):
    st_ = ConvStack(NetConfig(1, (1,), kernel_size=1), [np.ones((1, 1, 1, 1))], [np.zeros(1)])
    g = BevGrid(GridSpec.from_cells(7, 9, 0.05), rng.random((1, 7, 9)))
    assert np.array_equal(forward(st_, g).data, g.data.astype(np.float64))


def test_zero_weights_give_zero_output(rng):
    cfg = NetConfig(3, (4, 4, 1), pooling_stages=1)
    st_ = init(cfg, 0)
    for w, b in zip(st_.weights, st_.biases):
        w[:] = 0
        b[:] = 0
    g = BevGrid(GridSpec.from_cells(10, 12, 0.05), rng.random((1, 10, 12)))
    assert not forward(st_, g).data.any()


@pytest.mark.parametrize("shape", [(16, 16), (17, 23), (481, 33)])
def test_output_dims_match_input(shape, rng):
    for cfg in (tiny_config(), NetConfig(7, (2,) * 6 + (1,), pooling_stages=3)):
        g = BevGrid(GridSpec.from_cells(*shape, 0.05), rng.random((1,) + shape))
        out = forward(init(cfg, 1), g)
        assert out.shape == shape and out.channels == 1
        assert out.spec == g.spec


def test_forward_rejects_channel_mismatch(rng):
    g = BevGrid(GridSpec.from_cells(4, 4, 0.2, height_slices=2), rng.random((3, 4, 4)))
    with pytest.raises(ValueError):
        forward(init(tiny_config(), 0), g)


def test_single_conv_matches_scalar_oracle(rng):
    x = rng.standard_normal((1, 5, 6))
    w = rng.standard_normal((1, 1, 3, 3))
    b = rng.standard_normal(1)
    st_ = ConvStack(NetConfig(1, (1,)), [w], [b])
    out = forward(st_, FeatureMap(GridSpec.from_cells(5, 6, 0.05), x)).data
    assert np.abs(out - scalar_conv(x, w, b)).max() <= 1e-6


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_multichannel_matches_oracle(k, rng):
    x = rng.standard_normal((3, 7, 5))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    assert np.allclose(conv2d(x, w, b), scalar_conv(x, w, b), atol=1e-12)


def test_conv2d_backward_is_adjoint(rng):
    x = rng.standard_normal((3, 9, 8))
    w = rng.standard_normal((2, 3, 3, 3))
    g = rng.standard_normal((2, 9, 8))
    dx, dw, db = conv2d_backward(x, w, g)
    zero = np.zeros(2)
    # conv is bilinear in (x, w): <g, conv(x, w)> = <dx, x> = <dw, w>
    lhs = np.sum(g * conv2d(x, w, zero))
    assert np.sum(dx * x) == pytest.approx(lhs, rel=1e-12)
    assert np.sum(dw * w) == pytest.approx(lhs, rel=1e-12)
    assert np.allclose(db, g.sum(axis=(1, 2)))


def test_forward_finite_on_unit_inputs(rng):
    g = BevGrid(GridSpec.from_cells(40, 40, 0.05), rng.random((1, 40, 40)))
    for name in ("tiny", "small"):
        out = forward(init(CONFIG_LADDER[name](), 3), g)
        assert np.all(np.isfinite(out.data))
        assert np.array_equal(out.data, forward(init(CONFIG_LADDER[name](), 3), g).data)


def test_identity_embed(rng):
    spec = GridSpec(0.2, 1.0, 1.0, height_slices=3)
    g = BevGrid(spec, rng.random((4, 5, 5)))
    e = identity_embed(g)
    assert np.array_equal(e.data[0], g.data[-1].astype(np.float64))
    assert np.array_equal(identity_embed(e).data, e.data)
    off = PoseOffset(0.13, -0.07, 0.05)
    # BevGrid stores float32, so compare at that precision; the selection itself is exact
    lhs = identity_embed(warp(g, off)).data
    rhs = warp(identity_embed(g), off).data.astype(np.float32)
    assert np.array_equal(lhs, rhs)


def fusion_pair(rng, fine_center=Pose2(0.3, -0.4, 0.0)):
    fine = FeatureMap(GridSpec(0.05, 2.0, 1.5, center=fine_center), rng.standard_normal((1, 30, 40)))
    coarse = FeatureMap(GridSpec(0.2, 4.0, 4.0), rng.standard_normal((3, 20, 20)))
    return fine, coarse


def test_fuse_zero_mix_is_noop(rng):
    fine, coarse = fusion_pair(rng)
    out = fuse_multires(fine, coarse, Fusion.init(3, 0, mix=0.0))
    assert np.array_equal(out.data, fine.data)
    assert out.spec == fine.spec


def test_fuse_zero_coarse_is_noop(rng):
    fine, coarse = fusion_pair(rng)
    zero = FeatureMap(coarse.spec, np.zeros_like(coarse.data))
    fus = Fusion(rng.standard_normal((1, 3, 3, 3)), np.zeros(1), np.array([2.5]))
    assert np.allclose(fuse_multires(fine, zero, fus).data, fine.data, atol=0)


def test_fuse_constant_field_adds_constant(rng):
    fine, coarse = fusion_pair(rng)
    const = FeatureMap(coarse.spec, np.full((1, 20, 20), 0.8))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = fuse_multires(fine, const, Fusion(w, np.zeros(1), np.array([1.0])))
    # interior: away from the crop border where zero padding of the 3x3 conv bites
    d = (out.data - fine.data)[0, 8:-8, 8:-8]
    assert np.allclose(d, 0.8, atol=1e-12)


def test_fuse_rejects_uncovered_extent(rng):
    fine = FeatureMap(GridSpec(0.05, 5.0, 1.0), rng.standard_normal((1, 20, 100)))
    coarse = FeatureMap(GridSpec(0.2, 4.0, 4.0), rng.standard_normal((3, 20, 20)))
    with pytest.raises(ValueError):
        fuse_multires(fine, coarse, Fusion.init(3, 0, mix=1.0))


def test_checkpoint_roundtrip(tmp_path):
    f = init(tiny_config(), 1)
    base = init(NetConfig(2, (3, 3), in_channels=17), 2, frozen=True)
    fus = Fusion.init(3, 4, mix=0.25)
    path = tmp_path / "w.lpw"
    save_checkpoint(path, {"f": f, "base": base}, fus, {"note": "x"})
    raw = path.read_bytes()
    assert raw[:4] == b"LPW1"
    stacks, fus2, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert stacks["base"].frozen and not stacks["f"].frozen
    for a, b in zip(f.parameters() + base.parameters() + fus.parameters(),
                    stacks["f"].parameters() + stacks["base"].parameters() + fus2.parameters()):
        assert np.array_equal(a.astype(np.float32), b)
    save_checkpoint(tmp_path / "w2.lpw", stacks, fus2, meta)
    assert (tmp_path / "w2.lpw").read_bytes() == raw


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.lpw"
    p.write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(ValueError):
        load_checkpoint(p)
    save_checkpoint(p, {"f": init(tiny_config(), 0)})
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(p)


@given(st.floats(0.1, 50.0), st.integers(0, 1000))
def test_argmax_invariant_to_positive_scaling(scale, seed):
    from groundloc.matcher import OffsetGrid, argmax_pose, score_direct

    r = np.random.default_rng(seed)
    grid = OffsetGrid.symmetric(0.1, 0.05, 0.0, 0.0)
    on = FeatureMap(GridSpec.from_cells(8, 8, 0.05), r.standard_normal((1, 8, 8)))
    mp = FeatureMap(GridSpec.from_cells(12, 12, 0.05), r.standard_normal((1, 12, 12)))
    ref = argmax_pose(score_direct(on, mp, grid))
    on_s = FeatureMap(on.spec, on.data * scale)
    mp_s = FeatureMap(mp.spec, mp.data * scale)
    assert argmax_pose(score_direct(on_s, mp_s, grid)) == ref
