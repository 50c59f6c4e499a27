"""Command-line entry point: ``groundloc <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from ._backend import BACKEND


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # one-line diagnostic instead of usage dump
        self.exit(2, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> List[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _ints(text: str) -> List[int]:
    vals = _floats(text)
    if any(v != int(v) or v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated positive integers, got {text!r}")
    return [int(v) for v in vals]


def _names(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _scenario_seeds(seed: int, count: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_world(args) -> int:
    from .formats import write_scenario
    from .world import ScenarioConfig, gen_scenario

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ScenarioConfig(with_map=not args.no_map)
    for i, s in enumerate(_scenario_seeds(args.seed, args.count)):
        write_scenario(out, gen_scenario(s, cfg), f"scenario_{i:04d}")
    print(f"wrote {args.count} scenarios to {out}")
    return 0


def _load_nets(path):
    from .embed import load_checkpoint
    from .matcher import Nets

    stacks, fusion, meta = load_checkpoint(path)
    nets = Nets(stacks.get("f"), stacks.get("g"), stacks.get("base"), fusion)
    return nets, meta


def cmd_eval_loc(args) -> int:
    from .formats import read_corpus
    from .harness import JitterSpec, run_localizer_eval
    from .learn import TRAIN_LOCALIZER
    from .matcher import DEG, DESK_CONFIG, LocalizerConfig
    from .world import SensorModel

    corpus = read_corpus(args.scenarios)
    cfg = DESK_CONFIG
    nets = None
    if args.weights:
        nets, meta = _load_nets(args.weights)
        if "fine_extent" in meta:
            cfg = LocalizerConfig(tuple(meta["fine_extent"]), tuple(meta["coarse_extent"]))
    if args.window == "train":
        cfg = TRAIN_LOCALIZER
    elif args.window == "desk":
        cfg = DESK_CONFIG
    sensor = SensorModel(dropout_prob=args.dropout, intensity_noise_sigma=args.intensity_noise)
    spec = JitterSpec(args.trans_noise, args.rot_noise * DEG, args.seed)
    rep, _ = run_localizer_eval(corpus, nets, spec, args.out, args.trials, sensor, cfg, args.on_grid)
    print(f"r@1={rep.r1:.4f} r@2={rep.r2:.4f} n={rep.n_frames}")
    return 0


def cmd_train(args) -> int:
    from .embed import save_checkpoint
    from .formats import read_corpus
    from .learn import TRAIN_LOCALIZER, TrainConfig, default_side_nets, train_side_tuned

    corpus = read_corpus(args.scenarios)
    if any(sc.map is None for sc in corpus):
        raise ValueError("training needs scenarios generated with maps")
    tcfg = TrainConfig(steps=args.steps, learning_rate=args.lr, seed=args.seed,
                       intensity_gain=(0.5, 1.5), intensity_bias=(-0.1, 0.1))
    cfg = TRAIN_LOCALIZER
    res = train_side_tuned(corpus, default_side_nets(args.seed), cfg, tcfg)
    if res.base_digest_before != res.base_digest_after:
        raise RuntimeError("frozen backbone changed during training")
    meta = {"steps": args.steps, "lr": args.lr, "seed": args.seed,
            "fine_extent": list(cfg.fine_extent), "coarse_extent": list(cfg.coarse_extent)}
    n = res.nets
    save_checkpoint(args.out, {"f": n.f, "g": n.g, "base": n.base}, n.fusion, meta)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    res.write_loss_csv(loss_csv)
    print(f"final loss {res.losses[-1]:.4f}; weights -> {args.out}, loss curve -> {loss_csv}")
    return 0


def cmd_jitter_sweep(args) -> int:
    from .formats import read_corpus
    from .harness import run_jitter_sweep, sweep_levels

    corpus = read_corpus(args.scenarios)
    rows = run_jitter_sweep(corpus, sweep_levels(args.axis, args.levels, args.seed), args.out, args.axis)
    for r in rows:
        print(f"{args.axis} {r['level']:g}: collision {r['collision_rate']:.1f}%")
    return 0


def cmd_bench(args) -> int:
    from .embed import CONFIG_LADDER
    from .harness import bench_backends, bench_matcher

    configs = {}
    for name in args.configs:
        if name == "identity":
            configs[name] = None
        elif name in CONFIG_LADDER:
            configs[name] = CONFIG_LADDER[name]()
        else:
            raise ValueError(f"unknown net config {name!r}; choose from identity, {', '.join(CONFIG_LADDER)}")
    rows = bench_matcher(configs, args.sizes, args.reps, args.out)
    for r in rows:
        print(f"{r['config']:>8} {r['path']:>6} {r['size']:>5}  median {r['median_ms']:.1f} ms")
    if args.backends:
        bench_backends(args.sizes, args.reps, args.backends)
    return 0


def cmd_grad_check(args) -> int:
    from .learn import fd_gradient_oracle, gradcheck_instance, gradient_check

    pipe, sample = gradcheck_instance(args.seed)
    _, analytic = pipe.loss_and_grads(sample)
    numeric = fd_gradient_oracle(pipe, sample, 1e-3)
    ok, worst = gradient_check(analytic, numeric, 1e-3, 1e-6)
    print(f"seed {args.seed}: max relative error {worst:.3e} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="groundloc", description="Ground-intensity localization and pose-error experiments.")
    p.add_argument("--seed", type=int, default=0, help="global random seed (default 0)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seed_opt(sp):
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the global --seed")

    sp = sub.add_parser("gen-world", help="generate a seeded scenario corpus")
    seed_opt(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--no-map", action="store_true", help="skip intensity maps (planning-only corpus)")
    sp.set_defaults(func=cmd_gen_world)

    sp = sub.add_parser("eval-loc", help="localization recall from jittered priors")
    seed_opt(sp)
    sp.add_argument("--scenarios", required=True)
    w = sp.add_mutually_exclusive_group(required=True)
    w.add_argument("--weights")
    w.add_argument("--identity", action="store_true")
    sp.add_argument("--trans-noise", type=float, default=0.5, help="metres")
    sp.add_argument("--rot-noise", type=float, default=1.5, help="degrees")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--dropout", type=float, default=0.0)
    sp.add_argument("--intensity-noise", type=float, default=0.0)
    sp.add_argument("--on-grid", action="store_true", help="draw offsets from the search grid cells")
    sp.add_argument("--window", choices=["auto", "desk", "train"], default="auto")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval_loc)

    sp = sub.add_parser("train", help="side-tune the embeddings against a frozen backbone")
    seed_opt(sp)
    sp.add_argument("--scenarios", required=True)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--out", required=True, help="LPW1 checkpoint path")
    sp.add_argument("--loss-csv", help="loss curve path (default: <out>.loss.csv)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("jitter-sweep", help="planning metrics under translational or rotational pose noise")
    seed_opt(sp)
    sp.add_argument("--scenarios", required=True)
    sp.add_argument("--axis", choices=["trans", "rot"], required=True)
    sp.add_argument("--levels", type=_floats, required=True, help="metres or degrees, comma-separated")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_jitter_sweep)

    sp = sub.add_parser("bench", help="matcher runtime per net config, size and scoring path")
    seed_opt(sp)
    sp.add_argument("--configs", type=_names, default=["big", "tiny"])
    sp.add_argument("--sizes", type=_ints, default=[240, 480])
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--out", required=True)
    sp.add_argument("--backends", help="also write a compiled-vs-python kernel comparison CSV here")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("grad-check", help="analytic vs finite-difference gradients on a small instance")
    seed_opt(sp)
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"groundloc {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
