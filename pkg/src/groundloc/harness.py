"""Experiment harness: pose jitter, recall and planning metrics, the jitter
sweep, localizer evaluation and matcher benchmarks.

Every experiment is a pure function of its inputs and seeds; results are
written as CSV with fixed float formatting so reruns are byte-identical
(timing columns excepted).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ._backend import available_backends
from .embed import NetConfig, init
from .geometry import Pose2, PoseOffset, Trajectory, compose, inverse
from .matcher import (DEG, DESK_CONFIG, LocalizerConfig, Nets, OffsetGrid, default_offset_grid,
                      localize, score_direct, score_fft)
from .planner import (PlannerConfig, RolloutResult, forecast_samples, lateral_accel_and_jerk,
                      rollout_open_loop, route_frame, sample_trajectories, select_plan)
from .raster import BevGrid, GridSpec
from .world import Scenario, SensorModel, render_sweep

_EDGE_TOL = 1e-9


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _open_csv(path):
    path = Path(path)
    try:
        return open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ----------------------------------------------------------------------------
# jitter


@dataclass(frozen=True)
class JitterSpec:
    max_trans: float = 0.0
    max_rot: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_trans < 0 or self.max_rot < 0:
            raise ValueError("jitter maxima must be non-negative")


def draw_offsets(spec: JitterSpec, n: int) -> np.ndarray:
    """``n`` rows of independent ``(dx, dy, dyaw)`` draws, each uniform on ``[-m, m]``."""
    u = np.random.default_rng(spec.seed).uniform(-1.0, 1.0, (n, 3))
    return u * np.array([spec.max_trans, spec.max_trans, spec.max_rot])


def jitter_offset(spec: JitterSpec) -> PoseOffset:
    dx, dy, dyaw = draw_offsets(spec, 1)[0]
    return PoseOffset(float(dx), float(dy), float(dyaw))


def jitter(gt: Pose2, spec: JitterSpec) -> Pose2:
    """``gt`` perturbed by a seeded uniform offset expressed in the vehicle frame."""
    if spec.max_trans == 0.0 and spec.max_rot == 0.0:
        return gt
    return compose(gt, jitter_offset(spec).as_pose())


# ----------------------------------------------------------------------------
# recall


@dataclass(frozen=True)
class RecallReport:
    r1: float
    r2: float
    n_frames: int


def _cell(v: float, step: float) -> int:
    q = v / step
    return int(math.floor(abs(q) + 0.5)) * (1 if q >= 0 else -1)


def recall_hits(est: PoseOffset, truth: PoseOffset, grid: Optional[OffsetGrid] = None):
    """``(same cell, inside the r@2 box)`` for one estimate.

    The r@2 box spans one and a half grid steps on each axis, so it is
    7.5 cm by 7.5 cm by 0.75 degrees on the default grid.
    """
    grid = default_offset_grid() if grid is None else grid
    sx, sy, syaw = grid.steps
    e, t = est.as_tuple(), truth.as_tuple()
    steps = (sx, sy, syaw)
    hit1 = all(_cell(a, s) == _cell(b, s) for a, b, s in zip(e, t, steps))
    hit2 = all(abs(a - b) <= 1.5 * s + _EDGE_TOL for a, b, s in zip(e, t, steps))
    return hit1, hit2


def recall(estimates: Sequence[PoseOffset], truths: Sequence[PoseOffset],
           grid: Optional[OffsetGrid] = None) -> RecallReport:
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimates but {len(truths)} truths")
    n = len(truths)
    if n == 0:
        return RecallReport(0.0, 0.0, 0)
    h1 = h2 = 0
    for e, t in zip(estimates, truths):
        a, b = recall_hits(e, t, grid)
        h1 += a
        h2 += b
    return RecallReport(h1 / n, h2 / n, n)


# ----------------------------------------------------------------------------
# planning metrics


@dataclass(frozen=True)
class PlanningReport:
    collision_rate: float
    l2_human_at_5s: float
    lateral_acceleration: float
    jerk: float
    progress_at_5s: float


def _index_at(tau: Trajectory, t: float) -> int:
    t0 = tau.times[0]
    for i, ti in enumerate(tau.times):
        if abs(ti - t0 - t) <= 1e-9:
            return i
    raise ValueError(f"trajectory has no waypoint at t = {t} s")


def planning_metrics(rollouts: Sequence[RolloutResult], human_paths: Sequence[Trajectory],
                     routes: Optional[Sequence[np.ndarray]] = None, at: float = 5.0) -> PlanningReport:
    """Corpus-level planning metrics.

    Progress is the route station gained by the 5 s mark; when ``routes`` is
    omitted the human path itself serves as the route.
    """
    if len(rollouts) != len(human_paths):
        raise ValueError("rollouts and human paths differ in number")
    if not rollouts:
        raise ValueError("no rollouts")
    n = len(rollouts)
    coll = l2 = lat = jerk = prog = 0.0
    for k, (r, h) in enumerate(zip(rollouts, human_paths)):
        ex = r.executed
        i, j = _index_at(ex, at), _index_at(h, at)
        pe, ph = ex.poses[i], h.poses[j]
        coll += bool(r.collided)
        l2 += math.hypot(pe.x - ph.x, pe.y - ph.y)
        a, jk = lateral_accel_and_jerk(ex)
        lat += a
        jerk += jk
        route = h.xy() if routes is None else routes[k]
        s, _ = route_frame(route, np.array([[ex.poses[0].x, ex.poses[0].y], [pe.x, pe.y]]))
        prog += float(s[1] - s[0])
    return PlanningReport(100.0 * coll / n, l2 / n, lat / n, jerk / n, prog / n)


# ----------------------------------------------------------------------------
# jitter sweep

SWEEP_COLUMNS = ["axis", "level", "n_scenarios", "collision_rate", "l2_human_at_5s",
                 "lateral_acceleration", "jerk", "progress_at_5s",
                 "believed_collision_rate", "believed_l2_human_at_5s"]


def scenario_offset(spec: JitterSpec, scenario_seed: int) -> PoseOffset:
    """Per-scenario jitter draw.

    The unit draw depends only on the sweep seed and the scenario, so levels
    that share a seed scale the same direction and the error grows along a
    fixed ray as the level rises.
    """
    u = np.random.default_rng([spec.seed, scenario_seed]).uniform(-1.0, 1.0, 3)
    return PoseOffset(float(u[0] * spec.max_trans), float(u[1] * spec.max_trans), float(u[2] * spec.max_rot))


def plan_under_jitter(scenario: Scenario, err: PoseOffset, cfg: PlannerConfig):
    """Plan from the believed start and return ``(believed rollout, executed rollout)``."""
    start = scenario.sdv_gt.poses[0]
    believed = compose(start, err.as_pose())
    cands = sample_trajectories(believed, scenario.route, cfg)
    plan = select_plan(cands, forecast_samples(scenario.actors), scenario.route, cfg)
    as_believed = rollout_open_loop(plan, PoseOffset(0.0, 0.0, 0.0), scenario.actors, cfg.horizon, cfg)
    executed = rollout_open_loop(plan, err, scenario.actors, cfg.horizon, cfg)
    return as_believed, executed


def run_jitter_sweep(corpus: Sequence[Scenario], levels: Sequence[JitterSpec], out_path=None,
                     axis: str = "", cfg: PlannerConfig = PlannerConfig()) -> List[dict]:
    """One row of planning metrics per jitter level.

    ``axis`` labels the rows; pass translation-only or rotation-only specs to
    study the two noise types independently. Level values are written in
    metres for translation and degrees for rotation.
    """
    if not corpus:
        raise ValueError("empty scenario corpus")
    rows = []
    for spec in levels:
        believed, executed, human, routes = [], [], [], []
        for sc in corpus:
            b, e = plan_under_jitter(sc, scenario_offset(spec, sc.seed), cfg)
            believed.append(b)
            executed.append(e)
            human.append(sc.sdv_gt)
            routes.append(sc.route)
        rep = planning_metrics(executed, human, routes, cfg.horizon)
        brep = planning_metrics(believed, human, routes, cfg.horizon)
        level = spec.max_rot / DEG if axis == "rot" else spec.max_trans
        rows.append({"axis": axis, "level": level, "n_scenarios": len(corpus),
                     "collision_rate": rep.collision_rate, "l2_human_at_5s": rep.l2_human_at_5s,
                     "lateral_acceleration": rep.lateral_acceleration, "jerk": rep.jerk,
                     "progress_at_5s": rep.progress_at_5s,
                     "believed_collision_rate": brep.collision_rate,
                     "believed_l2_human_at_5s": brep.l2_human_at_5s})
    if out_path is not None:
        _write_rows(out_path, SWEEP_COLUMNS, rows)
    return rows


def sweep_levels(axis: str, values: Sequence[float], seed: int = 0) -> List[JitterSpec]:
    """Specs for a single-axis sweep; ``values`` in metres (``trans``) or degrees (``rot``)."""
    if axis == "trans":
        return [JitterSpec(float(v), 0.0, seed) for v in values]
    if axis == "rot":
        return [JitterSpec(0.0, float(v) * DEG, seed) for v in values]
    raise ValueError(f"unknown jitter axis {axis!r}; expected 'trans' or 'rot'")


def _write_rows(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with _open_csv(path) as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


# ----------------------------------------------------------------------------
# localizer evaluation

LOC_COLUMNS = ["trial", "scenario_seed", "frame", "true_dx", "true_dy", "true_dyaw_deg",
               "est_dx", "est_dy", "est_dyaw_deg", "r1_hit", "r2_hit"]


def run_localizer_eval(corpus: Sequence[Scenario], nets: Optional[Nets], spec: JitterSpec, out_path=None,
                       n_trials: int = 100, sensor: SensorModel = SensorModel(),
                       cfg: LocalizerConfig = DESK_CONFIG, on_grid: bool = False):
    """Localize from jittered priors and score the recovered offsets.

    Each trial picks a scenario and a frame on its ground-truth path, draws a
    correction offset per axis (uniform within ``spec``, or a uniformly chosen
    cell of the offset grid when ``on_grid``), places the prior so that
    ``compose(prior, offset)`` is the true pose, renders a sweep at the true
    pose and localizes. Returns ``(RecallReport, rows)``.
    """
    if not corpus:
        raise ValueError("empty scenario corpus")
    grid = cfg.grid
    rng = np.random.default_rng(spec.seed)
    xs = grid.x_offsets[np.abs(grid.x_offsets) <= spec.max_trans + _EDGE_TOL]
    ys = grid.y_offsets[np.abs(grid.y_offsets) <= spec.max_trans + _EDGE_TOL]
    yaws = grid.yaw_offsets[np.abs(grid.yaw_offsets) <= spec.max_rot + _EDGE_TOL]
    ests, truths, rows = [], [], []
    for t in range(n_trials):
        sc = corpus[t % len(corpus)]
        frame = int(rng.integers(len(sc.sdv_gt)))
        true_pose = sc.sdv_gt.poses[frame]
        if on_grid:
            truth = PoseOffset(float(rng.choice(xs)), float(rng.choice(ys)), float(rng.choice(yaws)))
        else:
            u = rng.uniform(-1.0, 1.0, 3)
            truth = PoseOffset(float(u[0] * spec.max_trans), float(u[1] * spec.max_trans),
                               float(u[2] * spec.max_rot))
        prior = compose(true_pose, inverse(truth.as_pose()))
        pts = render_sweep(sc.map, true_pose, sensor, int(rng.integers(0, 2**31 - 1)))
        est = localize(pts, sc.map, prior, nets, cfg).offset
        snapped = grid.snap(truth)
        h1, h2 = recall_hits(est, snapped, grid)
        ests.append(est)
        truths.append(snapped)
        rows.append({"trial": t, "scenario_seed": sc.seed, "frame": frame,
                     "true_dx": truth.dx, "true_dy": truth.dy, "true_dyaw_deg": truth.dyaw / DEG,
                     "est_dx": est.dx, "est_dy": est.dy, "est_dyaw_deg": est.dyaw / DEG,
                     "r1_hit": int(h1), "r2_hit": int(h2)})
    rep = recall(ests, truths, grid)
    if out_path is not None:
        _write_rows(out_path, LOC_COLUMNS, rows)
    return rep, rows


# ----------------------------------------------------------------------------
# benchmarks

BENCH_COLUMNS = ["config", "path", "size", "median_ms", "p90_ms"]


def _timings(fn, reps: int) -> np.ndarray:
    out = np.empty(reps)
    for r in range(reps):
        t0 = time.perf_counter()
        fn()
        out[r] = time.perf_counter() - t0
    return out * 1e3


def bench_inputs(size: int, grid: OffsetGrid, seed: int = 0):
    """Random online raster of ``size x size`` fine cells and a map raster padded for ``grid``."""
    rng = np.random.default_rng(seed)
    res = 0.05
    tx, ty = grid.translation_cells(res)
    pad = int(max(np.abs(tx).max(), np.abs(ty).max()))
    on_spec = GridSpec.from_cells(size, size, res)
    map_spec = GridSpec.from_cells(size + 2 * pad, size + 2 * pad, res)
    online = BevGrid(on_spec, rng.random((1, size, size)))
    region = BevGrid(map_spec, rng.random((1, size + 2 * pad, size + 2 * pad)))
    return online, region


def bench_matcher(configs: Dict[str, Optional[NetConfig]], sizes: Sequence[int], reps: int = 5,
                  out_path=None, grid: Optional[OffsetGrid] = None, paths=("direct", "fft")) -> List[dict]:
    """Wall-clock of the online embedding followed by matching, per config, size and path.

    The map embedding is computed once outside the timed region since it
    can be prepared offline. A config of ``None`` means the identity
    embedding, which times matching alone.
    """
    from .embed import forward, identity_embed

    if reps < 3:
        raise ValueError("reps must be >= 3")
    grid = default_offset_grid() if grid is None else grid
    rows = []
    for name, ncfg in configs.items():
        stack = None if ncfg is None else init(ncfg, 0)

        def embed(g):
            return identity_embed(g) if stack is None else forward(stack, g)

        for size in sizes:
            online, region = bench_inputs(int(size), grid)
            map_emb = embed(region)
            for path in paths:
                score = score_fft if path == "fft" else score_direct
                ms = _timings(lambda: score(embed(online), map_emb, grid), reps)
                rows.append({"config": name, "path": path, "size": int(size),
                             "median_ms": float(np.median(ms)), "p90_ms": float(np.percentile(ms, 90))})
    if out_path is not None:
        _write_rows(out_path, BENCH_COLUMNS, rows)
    return rows


BACKEND_COLUMNS = ["kernel", "backend", "size", "median_ms", "p90_ms"]


def bench_backends(sizes: Sequence[int] = (64, 128), reps: int = 5, out_path=None) -> List[dict]:
    """Compiled versus pure-Python kernels on the same inputs."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    grid = default_offset_grid()
    cos_t = np.cos(grid.yaw_offsets)
    sin_t = np.sin(grid.yaw_offsets)
    tx, ty = grid.translation_cells(0.05)
    rows = []
    for size in sizes:
        online, region = bench_inputs(int(size), grid)
        on, mp = online.data[0].astype(np.float64), region.data[0].astype(np.float64)
        rng = np.random.default_rng(1)
        n_pts = 200_000
        cols = rng.integers(0, size, n_pts)
        rws = rng.integers(0, size, n_pts)
        sl = rng.integers(-1, 4, n_pts)
        inten = rng.random(n_pts)
        for name, mod in available_backends().items():
            jobs = {
                "warp": lambda: mod.warp(online.data.astype(np.float64), math.cos(0.02), math.sin(0.02), 1.5, -2.0),
                "direct_scores": lambda: mod.direct_scores(on, mp, cos_t, sin_t, tx, ty),
                "voxel_bin": lambda: mod.voxel_bin(cols, rws, sl, inten, size, size, 4),
            }
            for kernel, fn in jobs.items():
                ms = _timings(fn, reps)
                rows.append({"kernel": kernel, "backend": name, "size": int(size),
                             "median_ms": float(np.median(ms)), "p90_ms": float(np.percentile(ms, 90))})
    if out_path is not None:
        _write_rows(out_path, BACKEND_COLUMNS, rows)
    return rows
