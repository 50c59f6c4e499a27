import math

import numpy as np
import pytest

from groundloc.geometry import PoseOffset
from groundloc.learn import (SGD, Adam, TrainConfig, backward, corrupt_intensity, default_side_nets,
                             fd_gradient_oracle, gradcheck_instance, gradient_check, loss_ce, make_sample,
                             one_hot_target, rotation_operator, train_side_tuned, TRAIN_LOCALIZER)
from groundloc.matcher import DEG, ProbVolume, default_offset_grid
from groundloc.raster import warp, FeatureMap, GridSpec

GRID = default_offset_grid()


def test_one_hot_examples():
    t = one_hot_target(GRID, PoseOffset(0.1, -0.2, 1.0 * DEG))
    assert t.probs.sum() == 1.0
    assert t.probs[GRID.nearest_index(PoseOffset(0.1, -0.2, 1.0 * DEG))] == 1.0
    snapped = one_hot_target(GRID, PoseOffset(0.026, 0, 0))
    assert snapped.probs[GRID.nearest_index(PoseOffset(0.05, 0, 0))] == 1.0
    with pytest.raises(ValueError):
        one_hot_target(GRID, PoseOffset(0.0, 0.0, 3.0 * DEG))


def test_loss_examples():
    t = one_hot_target(GRID, PoseOffset())
    uniform = ProbVolume(np.full(GRID.shape, 1.0 / GRID.size), GRID)
    assert loss_ce(uniform, t) == pytest.approx(math.log(3087), abs=1e-12)
    assert loss_ce(uniform, t) == pytest.approx(8.0349, abs=1e-4)
    assert loss_ce(t, t) == 0.0
    p = np.full(GRID.shape, 0.5 / (GRID.size - 1))
    p[GRID.nearest_index(PoseOffset())] = 0.5
    assert loss_ce(ProbVolume(p, GRID), t) == pytest.approx(math.log(2), abs=1e-12)


def test_rotation_operator_matches_warp():
    rng = np.random.default_rng(0)
    x = rng.random((11, 13))
    op = rotation_operator(11, 13, 1.5 * DEG)
    ref = warp(FeatureMap(GridSpec.from_cells(11, 13, 0.05), x), PoseOffset(0, 0, 1.5 * DEG)).data[0]
    assert np.allclose((op @ x.ravel()).reshape(11, 13), ref, atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1])
def test_backward_matches_finite_differences(seed):
    pipe, sample = gradcheck_instance(seed)
    analytic = backward(pipe, sample)
    numeric = fd_gradient_oracle(pipe, sample, 1e-3, count_kinks=True)
    assert numeric.kink_crossings == 0
    ok, worst = gradient_check(analytic, numeric, 1e-3, 1e-6)
    assert ok, worst


def test_frozen_parameters_get_zero_gradient():
    pipe, sample = gradcheck_instance(2)
    g = backward(pipe, sample)
    assert all(not a.any() for a in g.grads["base"])
    pipe.nets.f.frozen = True
    g = backward(pipe, sample)
    assert all(not a.any() for a in g.grads["f"])
    assert any(a.any() for a in g.grads["g"])
    fd = fd_gradient_oracle(pipe, sample, 1e-3)
    assert all(not a.any() for a in fd.grads["f"])


def test_saturated_loss_has_vanishing_gradient():
    pipe, sample = gradcheck_instance(0)
    pipe.nets.fusion.mix[:] = 0.0
    sc = pipe.scores(sample)
    sample.target = tuple(int(v) for v in np.unravel_index(np.argmax(sc), sc.shape))
    pipe.nets.g.weights[-1] *= 1e4
    pipe.nets.g.biases[-1] *= 1e4
    loss, g = pipe.loss_and_grads(sample)
    assert loss < 1e-9
    assert g.norm() < 1e-6


def test_score_shift_leaves_loss_and_gradients_unchanged():
    pipe, sample = gradcheck_instance(3)
    sc, tape = pipe.scores(sample, keep=True)
    l0, g0 = pipe.backward(sc, tape, sample)
    l1, g1 = pipe.backward(sc + 57.0, tape, sample)
    assert l1 == pytest.approx(l0, abs=1e-9)
    assert np.allclose(g0.flat(), g1.flat(), atol=1e-9)


def test_backward_needs_retained_activations():
    pipe, sample = gradcheck_instance(0)
    with pytest.raises(ValueError):
        pipe.backward(pipe.scores(sample), {}, sample)


def test_fd_oracle_on_quadratic_toy_loss():
    pipe, sample = gradcheck_instance(0)
    a, b = 1.7, -0.3

    def toy(_):
        return sum(float(np.sum(a * p * p + b * p)) for p in pipe.nets.g.parameters())

    fd = fd_gradient_oracle(pipe, sample, 1e-3, loss_fn=toy)
    for p, d in zip(pipe.nets.g.parameters(), fd.grads["g"]):
        assert np.allclose(d, 2 * a * p + b, atol=1e-8)
    with pytest.raises(ValueError):
        fd_gradient_oracle(pipe, sample, 0.0)


def test_optimizers_on_quadratic():
    for make in (lambda p: Adam(p, 0.05), lambda p: SGD(p, 0.1)):
        x = np.array([3.0, -2.0])
        opt = make([x])
        for _ in range(400):
            opt.step([2 * x])
        assert np.abs(x).max() < 1e-2


def test_corrupt_intensity():
    pts = np.array([[0, 0, 0, 0.2], [1, 1, 0, 0.9]])
    out = corrupt_intensity(pts, 1.5, 0.1)
    assert out[:, 3] == pytest.approx([0.4, 1.0])
    assert np.array_equal(out[:, :3], pts[:, :3])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_training_zero_steps_and_freeze(scenario):
    nets = default_side_nets(0)
    res = train_side_tuned([scenario], nets, TRAIN_LOCALIZER, TrainConfig(steps=0))
    assert res.losses == []
    assert res.nets.f.digest() == nets.f.digest() and res.nets.g.digest() == nets.g.digest()
    res = train_side_tuned([scenario], nets, TRAIN_LOCALIZER, TrainConfig(steps=3, seed=1))
    assert res.base_digest_before == res.base_digest_after == nets.base.digest()
    assert res.nets.f.digest() != nets.f.digest()
    again = train_side_tuned([scenario], nets, TRAIN_LOCALIZER, TrainConfig(steps=3, seed=1))
    assert again.losses == res.losses
    assert again.nets.g.digest() == res.nets.g.digest()


def test_training_requires_frozen_base(scenario):
    nets = default_side_nets(0)
    nets.base.frozen = False
    with pytest.raises(ValueError):
        train_side_tuned([scenario], nets, TRAIN_LOCALIZER, TrainConfig(steps=1))


def test_make_sample_target_and_shapes(scenario):
    off = PoseOffset(0.12, -0.31, -0.9 * DEG)
    s = make_sample(scenario, scenario.sdv_gt.poses[2], off, TRAIN_LOCALIZER,
                    TrainConfig().sensor, 0)
    assert s.target == GRID.nearest_index(off)
    assert s.fine.shape == (1, 241, 241)
    assert s.map_region.shape == (1, 261, 261)
    assert s.coarse.shape == (17, 80, 80)


def test_loss_csv(tmp_path, scenario):
    res = train_side_tuned([scenario], default_side_nets(1), TRAIN_LOCALIZER, TrainConfig(steps=2))
    p = tmp_path / "loss.csv"
    res.write_loss_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 3
    assert float(lines[1].split(",")[1]) == pytest.approx(res.losses[0], rel=1e-8)
