"""Cross-entropy localization objective, exact reverse pass and side-tuned training.

The differentiable pipeline is::

    sweep -> g (+ fused coarse evidence) -> rotate per yaw --\
                                                             >-- correlate -> softmax -> CE
    map region -------------------------------> f ----------/

The coarse backbone (``base``) stays frozen; only ``f``, ``g`` and the
fusion parameters are trained. Bilinear rotation weights are constants with
respect to the parameters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal, sparse

from ._kernels_py import _bilinear_taps, warp_source_coords
from .embed import ConvStack, Fusion, conv2d, fuse_backward, fuse_multires
from .geometry import Pose2, PoseOffset, compose, inverse
from .matcher import LocalizerConfig, Nets, OffsetGrid, ProbVolume, correlate_fft, map_region
from .raster import FeatureMap, GridSpec, voxelize
from .world import Scenario, SensorModel, render_sweep


# ----------------------------------------------------------------------------
# objective


def one_hot_target(grid: OffsetGrid, gt_offset: PoseOffset) -> ProbVolume:
    """Probability one at the grid cell nearest to ``gt_offset`` (per-axis rounding)."""
    k, i, j = grid.nearest_index(gt_offset)
    p = np.zeros(grid.shape)
    p[k, i, j] = 1.0
    return ProbVolume(p, grid)


def loss_ce(p: ProbVolume, target: ProbVolume) -> float:
    """``-sum target * log p``; with a one-hot target this is ``-log p(gt)``."""
    mask = target.probs > 0
    return float(-np.sum(target.probs[mask] * np.log(np.clip(p.probs[mask], 1e-300, 1.0))))


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max()
    return scores - m - math.log(np.exp(scores - m).sum())


# ----------------------------------------------------------------------------
# rotation operators


@lru_cache(maxsize=64)
def rotation_operator(h: int, w: int, yaw: float) -> sparse.csr_matrix:
    """Sparse matrix ``A`` with ``vec(rotate(x)) = A @ vec(x)`` for an ``h x w`` raster."""
    sy, sx = warp_source_coords(h, w, h, w, math.cos(yaw), math.sin(yaw), 0.0, 0.0)
    idx, wts = _bilinear_taps(sy.ravel(), sx.ravel(), h, w)
    rows = np.tile(np.arange(h * w), 4)
    return sparse.csr_matrix((np.concatenate(wts), (rows, np.concatenate(idx))), shape=(h * w, h * w))


# ----------------------------------------------------------------------------
# training sample and pipeline


@dataclass(eq=False)
class Sample:
    """One localization frame prepared for the network."""

    fine: np.ndarray  # [1, H, W] intensity raster of the sweep
    coarse: Optional[np.ndarray]  # [C, Hc, Wc] coarse voxelization
    map_region: np.ndarray  # [1, Hm, Wm] map intensity in the prior frame
    target: Tuple[int, int, int]
    fine_spec: GridSpec
    coarse_spec: Optional[GridSpec] = None


@dataclass
class GradientSet:
    """Per-parameter gradients keyed like :meth:`Pipeline.named_parameters`."""

    grads: Dict[str, List[np.ndarray]]
    # finite-difference stencils that flipped a ReLU mask (only counted on request)
    kink_crossings: int = 0

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for k in sorted(self.grads) for g in self.grads[k]])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


@dataclass(eq=False)
class Pipeline:
    """Differentiable localizer: nets plus the offset grid they are trained on."""

    nets: Nets
    grid: OffsetGrid

    def named_parameters(self) -> Dict[str, List[np.ndarray]]:
        out = {}
        for name in ("f", "g", "base"):
            st = getattr(self.nets, name)
            if st is not None:
                out[name] = st.parameters()
        if self.nets.fusion is not None:
            out["fusion"] = self.nets.fusion.parameters()
        return out

    def frozen(self, name: str) -> bool:
        st = getattr(self.nets, name, None)
        return bool(getattr(st, "frozen", False))

    def _trans(self, res: float):
        return self.grid.translation_cells(res)

    def scores(self, s: Sample, keep: bool = False):
        nets = self.nets
        tape: dict = {}
        if nets.g is None:
            gout = s.fine
        else:
            gout, tape["g"] = nets.g.run(s.fine, keep=True)
        emb = gout
        if nets.uses_fusion and s.coarse is not None:
            base_feat = nets.base.run(s.coarse)
            fused, tape["fusion"] = fuse_multires(FeatureMap(s.fine_spec, gout),
                                                  FeatureMap(s.coarse_spec, base_feat),
                                                  nets.fusion, keep=True)
            emb = fused.data
        if nets.f is None:
            fout = s.map_region
        else:
            fout, tape["f"] = nets.f.run(s.map_region, keep=True)
        h, w = emb.shape[1:]
        ops = [rotation_operator(h, w, float(a)) for a in self.grid.yaw_offsets]
        rot = np.stack([np.stack([(op @ ch.ravel()).reshape(h, w) for ch in emb]) for op in ops])
        tx, ty = self._trans(s.fine_spec.resolution)
        sc = correlate_fft(rot, fout, tx, ty)
        if keep:
            tape.update(rot=rot, fout=fout, ops=ops, emb_shape=emb.shape, tx=tx, ty=ty)
            return sc, tape
        return sc

    def relu_signature(self, s: Sample) -> np.ndarray:
        """Concatenated ReLU masks of ``f`` and ``g``; changes iff an activation crosses zero."""
        parts = []
        for name, x in (("g", s.fine), ("f", s.map_region)):
            st = getattr(self.nets, name)
            if st is not None:
                _, tape = st.run(x, keep=True)
                parts += [e["relu_mask"].ravel() for e in tape if "relu_mask" in e]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    def loss(self, s: Sample) -> float:
        sc = self.scores(s)
        return float(-_log_softmax(sc)[s.target])

    def loss_and_grads(self, s: Sample) -> Tuple[float, GradientSet]:
        sc, tape = self.scores(s, keep=True)
        return self.backward(sc, tape, s)

    def backward(self, sc: np.ndarray, tape: dict, s: Sample) -> Tuple[float, GradientSet]:
        """Exact gradients of the CE loss w.r.t. all unfrozen parameters."""
        for key in ("rot", "fout", "ops"):
            if key not in tape:
                raise ValueError("forward activations were not retained")
        logp = _log_softmax(sc)
        loss = float(-logp[s.target])
        dsc = np.exp(logp)
        dsc[s.target] -= 1.0

        rot, fout = tape["rot"], tape["fout"]
        k_n, c_n, h, w = rot.shape
        hm, wm = fout.shape[1:]
        tx, ty = tape["tx"], tape["ty"]
        py, px = (hm - h) // 2, (wm - w) // 2
        lag = np.zeros((k_n, hm - h + 1, wm - w + 1))
        lag[:, (py + ty)[:, None], (px + tx)[None, :]] = dsc
        d_emb = np.zeros(tape["emb_shape"])
        d_fout = np.zeros_like(fout)
        for k in range(k_n):
            for c in range(c_n):
                d_rot = signal.correlate(fout[c], lag[k], mode="valid", method="fft")
                d_emb[c] += (tape["ops"][k].T @ d_rot.ravel()).reshape(h, w)
                d_fout[c] += signal.convolve(rot[k, c], lag[k], mode="full", method="fft")

        grads: Dict[str, List[np.ndarray]] = {}
        nets = self.nets
        if "fusion" in tape:
            fg = fuse_backward(d_emb, nets.fusion, tape["fusion"])
            grads["fusion"] = fg
        if nets.g is not None:
            if nets.g.frozen:
                grads["g"] = [np.zeros_like(p) for p in nets.g.parameters()]
            else:
                grads["g"], _ = nets.g.backward(d_emb, tape["g"])
        if nets.f is not None:
            if nets.f.frozen:
                grads["f"] = [np.zeros_like(p) for p in nets.f.parameters()]
            else:
                grads["f"], _ = nets.f.backward(d_fout, tape["f"])
        if nets.base is not None:
            grads["base"] = [np.zeros_like(p) for p in nets.base.parameters()]
        return loss, GradientSet(grads)


def backward(pipeline: Pipeline, sample: Sample) -> GradientSet:
    return pipeline.loss_and_grads(sample)[1]


def fd_gradient_oracle(pipeline: Pipeline, sample: Sample, step: float = 1e-3,
                       loss_fn=None, count_kinks: bool = False) -> GradientSet:
    """Central-difference gradient of every unfrozen parameter entry (two forward passes each).

    Frozen stacks get zero entries. With ``count_kinks`` the number of stencils
    whose perturbation flips a ReLU mask is recorded; central differences are
    meaningless across such kinks.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    loss_fn = loss_fn or pipeline.loss
    ref = pipeline.relu_signature(sample) if count_kinks else None
    kinks = 0
    grads: Dict[str, List[np.ndarray]] = {}
    for name, params in pipeline.named_parameters().items():
        if pipeline.frozen(name):
            grads[name] = [np.zeros_like(p) for p in params]
            continue
        out = []
        for p in params:
            g = np.zeros_like(p)
            flat = p.reshape(-1)
            gf = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                vals = []
                for delta in (step, -step):
                    flat[i] = orig + delta
                    vals.append(loss_fn(sample))
                    if count_kinks and not np.array_equal(pipeline.relu_signature(sample), ref):
                        kinks += 1
                flat[i] = orig
                gf[i] = (vals[0] - vals[1]) / (2.0 * step)
            out.append(g)
        grads[name] = out
    return GradientSet(grads, kinks)


def gradient_check(analytic: GradientSet, numeric: GradientSet, rel_tol: float = 1e-3,
                   abs_tol: float = 1e-6) -> Tuple[bool, float]:
    """Compare gradient sets entrywise; returns (all within tolerance, worst relative error)."""
    a, n = analytic.flat(), numeric.flat()
    diff = np.abs(a - n)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    ok = (diff <= abs_tol) | (rel <= rel_tol)
    worst = float(np.max(np.where(diff <= abs_tol, 0.0, rel))) if rel.size else 0.0
    return bool(np.all(ok)), worst


# ----------------------------------------------------------------------------
# sample generation


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 1
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    noise_envelope: Tuple[float, float] = (0.5, 1.5 * math.pi / 180.0)
    seed: int = 0
    sensor: SensorModel = field(default_factory=lambda: SensorModel(n_rays=512, max_range=6.0))
    intensity_gain: Tuple[float, float] = (1.0, 1.0)
    intensity_bias: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


def corrupt_intensity(points: np.ndarray, gain: float, bias: float) -> np.ndarray:
    """Per-sweep calibration error: ``clip(gain * i + bias, 0, 1)``."""
    out = points.copy()
    out[:, 3] = np.clip(gain * out[:, 3] + bias, 0.0, 1.0)
    return out


def make_sample(scenario: Scenario, true_pose: Pose2, gt_offset: PoseOffset, cfg: LocalizerConfig,
                sensor: SensorModel, seed: int, with_coarse: bool = True,
                gain: float = 1.0, bias: float = 0.0) -> Sample:
    """Render a sweep at ``true_pose`` and pair it with the map seen from the prior.

    The prior is ``true_pose`` moved by the inverse of ``gt_offset`` so that
    ``compose(prior, gt_offset) == true_pose``.
    """
    prior = compose(true_pose, inverse(gt_offset.as_pose()))
    pts = render_sweep(scenario.map, true_pose, sensor, seed)
    if gain != 1.0 or bias != 0.0:
        pts = corrupt_intensity(pts, gain, bias)
    fs = cfg.fine_spec()
    fine = voxelize(pts, fs).data.astype(np.float64)
    coarse = cs = None
    if with_coarse:
        cs = cfg.coarse_spec()
        coarse = voxelize(pts, cs).data.astype(np.float64)
    region = map_region(scenario.map, prior, fs, cfg.map_padding()).data.astype(np.float64)
    return Sample(fine, coarse, region, cfg.grid.nearest_index(gt_offset), fs, cs)


def random_sample(scenarios: Sequence[Scenario], rng: np.random.Generator, cfg: LocalizerConfig,
                  tcfg: TrainConfig, with_coarse: bool = True) -> Sample:
    sc = scenarios[int(rng.integers(len(scenarios)))]
    true_pose = sc.sdv_gt.poses[int(rng.integers(len(sc.sdv_gt)))]
    mt, mr = tcfg.noise_envelope
    off = PoseOffset(rng.uniform(-mt, mt), rng.uniform(-mt, mt), rng.uniform(-mr, mr))
    gain = rng.uniform(*tcfg.intensity_gain)
    bias = rng.uniform(*tcfg.intensity_bias)
    seed = int(rng.integers(0, 2**31 - 1))
    return make_sample(sc, true_pose, off, cfg, tcfg.sensor, seed, with_coarse, gain, bias)


# ----------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: List[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: List[np.ndarray], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: List[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * g


@dataclass
class TrainResult:
    nets: Nets
    losses: List[float]
    base_digest_before: str
    base_digest_after: str

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["step", "loss"])
            for i, l in enumerate(self.losses):
                wr.writerow([i, f"{l:.9g}"])


def trainable_names(nets: Nets) -> List[str]:
    names = []
    for name in ("f", "g"):
        st = getattr(nets, name)
        if st is not None and not st.frozen:
            names.append(name)
    if nets.uses_fusion:
        names.append("fusion")
    return names


def train_side_tuned(scenarios: Sequence[Scenario], nets: Nets, cfg: LocalizerConfig,
                     tcfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Train ``f``, ``g`` and fusion against a frozen coarse backbone.

    ``nets`` is left untouched; trained copies are returned.
    """
    if nets.base is not None and not nets.base.frozen:
        raise ValueError("the coarse backbone must be frozen for side-tuning")
    work = Nets(nets.f.copy() if nets.f is not None else None,
                nets.g.copy() if nets.g is not None else None,
                nets.base,
                nets.fusion.copy() if nets.fusion is not None else None)
    before = nets.base.digest() if nets.base is not None else ""
    pipe = Pipeline(work, cfg.grid)
    named = pipe.named_parameters()
    names = trainable_names(work)
    params = [p for n in names for p in named[n]]
    opt = (Adam(params, tcfg.learning_rate, tcfg.betas, tcfg.eps) if tcfg.optimizer == "adam"
           else SGD(params, tcfg.learning_rate))
    rng = np.random.default_rng(tcfg.seed)
    losses: List[float] = []
    for _ in range(tcfg.steps):
        acc = [np.zeros_like(p) for p in params]
        total = 0.0
        for _ in range(tcfg.batch_size):
            s = random_sample(scenarios, rng, cfg, tcfg, work.uses_fusion)
            loss, gs = pipe.loss_and_grads(s)
            total += loss
            flat = [g for n in names for g in gs.grads[n]]
            for a, g in zip(acc, flat):
                a += g
        opt.step([a / tcfg.batch_size for a in acc])
        losses.append(total / tcfg.batch_size)
    after = nets.base.digest() if nets.base is not None else ""
    return TrainResult(work, losses, before, after)


def mean_loss(pipeline: Pipeline, samples: Sequence[Sample]) -> float:
    return float(np.mean([pipeline.loss(s) for s in samples]))


# Smaller localization window used for training: the training sensor only
# reaches 6 m, so a 12 m crop holds every return at a quarter of the cost.
TRAIN_LOCALIZER = LocalizerConfig(fine_extent=(12.05, 12.05), coarse_extent=(16.0, 16.0))


def default_side_nets(seed: int, hidden: int = 4, coarse_channels: int = 17) -> Nets:
    """Fresh 3-layer ``f``/``g``, a frozen 2-layer coarse backbone and a zero-mix fusion head."""
    from .embed import NetConfig, init

    ss = np.random.SeedSequence(seed).generate_state(4)
    f = init(NetConfig(3, (hidden, hidden, 1)), int(ss[0]))
    g = init(NetConfig(3, (hidden, hidden, 1)), int(ss[1]))
    base = init(NetConfig(2, (hidden, hidden), in_channels=coarse_channels), int(ss[2]), frozen=True)
    return Nets(f, g, base, Fusion.init(hidden, int(ss[3])))


# ----------------------------------------------------------------------------
# gradient-check instances


def _first_layer_smooth(stack: ConvStack, x: np.ndarray, step: float) -> bool:
    """True when no single-entry perturbation of the first layer can flip a ReLU.

    Perturbing weight ``w[o, c, dy, dx]`` by ``step`` moves pre-activation
    ``z[o]`` by ``step * x[c]`` at the matching tap; a bias moves it by ``step``.
    """
    if stack.config.layers < 2:
        return True
    w, b = stack.weights[0], stack.biases[0]
    z = np.abs(conv2d(x, w, b))
    k = w.shape[2]
    p = k // 2
    xp = np.abs(np.pad(x, ((0, 0), (p, p), (p, p))))
    h, wd = x.shape[1:]
    if np.any(z <= step):
        return False
    for c in range(x.shape[0]):
        for dy in range(k):
            for dx in range(k):
                if np.any(z <= step * xp[c, dy:dy + h, dx:dx + wd][None]):
                    return False
    return True


def gradcheck_instance(seed: int, size: int = 16, hidden: int = 4, step: float = 1e-3,
                       max_tries: int = 1000) -> Tuple[Pipeline, Sample]:
    """Seeded random 2-layer ``f``/``g`` + frozen base + fusion problem on ``size x size`` inputs.

    Inputs are scaled to [0, 0.1] with first-layer weights 10x wider than
    He-normal, which keeps activations O(1) while shrinking how far a weight
    perturbation moves a pre-activation. Output layers are scaled by 0.3 so
    score spreads stay small enough for the central difference truncation
    error to sit well under the check tolerance. Draws are rejected until no
    finite-difference stencil of width ``step`` straddles a ReLU kink.
    """
    from .embed import NetConfig, init

    grid = OffsetGrid.symmetric(0.15, 0.05, 1.0 * math.pi / 180.0, 0.5 * math.pi / 180.0)
    pad = 3
    fs = GridSpec.from_cells(size, size, 0.05)
    nc = max(2, int(math.ceil(size * 0.05 / 0.2)) + 1)
    cs = GridSpec.from_cells(nc, nc, 0.2, height_slices=3)
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(max_tries):
        rng = np.random.default_rng(child)
        nets = []
        for _ in range(2):
            st = init(NetConfig(2, (hidden, 1)), int(rng.integers(2**31)))
            st.weights[0] *= 10.0
            st.biases[0] = rng.uniform(-0.5, 0.5, hidden)
            st.weights[1] *= 0.3
            nets.append(st)
        f, g = nets
        base = init(NetConfig(2, (3, 3), in_channels=4), int(rng.integers(2**31)), frozen=True)
        fusion = Fusion.init(3, int(rng.integers(2**31)), mix=0.5)
        fine = 0.1 * rng.random((1, size, size)) * (rng.random((1, size, size)) < 0.7)
        region = 0.1 * rng.random((1, size + 2 * pad, size + 2 * pad))
        coarse = rng.random((4, nc, nc))
        target = tuple(int(rng.integers(n)) for n in grid.shape)
        sample = Sample(fine, coarse, region, target, fs, cs)
        if _first_layer_smooth(g, fine, step) and _first_layer_smooth(f, region, step):
            return Pipeline(Nets(f, g, base, fusion), grid), sample
    raise RuntimeError("no kink-free instance found")
