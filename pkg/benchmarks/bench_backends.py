"""Compare the compiled kernels with the pure-Python fallback.

Usage::

    python3 benchmarks/bench_backends.py [--sizes 64,128] [--reps 5] [--out backends.csv]
"""

import argparse

from groundloc.harness import bench_backends


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="64,128")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out")
    args = p.parse_args()
    rows = bench_backends([int(s) for s in args.sizes.split(",")], args.reps, args.out)
    by_key = {(r["kernel"], r["size"], r["backend"]): r["median_ms"] for r in rows}
    print(f"{'kernel':>14} {'size':>5} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for kernel, size in sorted({(k, s) for k, s, _ in by_key}):
        py = by_key[(kernel, size, "python")]
        cy = by_key.get((kernel, size, "cython"))
        if cy is None:
            print(f"{kernel:>14} {size:>5} {py:10.2f} {'n/a':>10} {'n/a':>8}")
        else:
            print(f"{kernel:>14} {size:>5} {py:10.2f} {cy:10.2f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
