"""Compiled vs numpy kernel timings for every accumulator mode.

    python benchmarks/backends.py [--shape 256x256x256] [--reps 5] [--out backends.csv]

Prints the median time per backend and the compiled-over-numpy speedup.
"""
import argparse
import csv

from wrapnet.kernels import available_backends
from wrapnet.kernels.bench import bench_gemm

MODES = ["exact32", "wrapped(32)", "wrapped(8)", "packed_isolated(8,64)",
         "packed_buffered(8,64)", "packed_contaminated(8,64)", "packed_isolated(4,32)"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shape", default="256x256x256")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args(argv)
    shape = tuple(int(s) for s in args.shape.split("x"))
    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; numpy timings only")
    rows = []
    for mode in MODES:
        t = {b: bench_gemm(shape, mode, repetitions=args.reps, backend=b).median_ns for b in backends}
        speedup = t["numpy"] / t["cython"] if "cython" in t else float("nan")
        rows.append({"mode": mode, **{f"{b}_ms": t[b] / 1e6 for b in backends}, "speedup": speedup})
    print(f"{'mode':<28}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    for r in rows:
        print(f"{r['mode']:<28}" + "".join(f"{r[b + '_ms']:>12.2f}" for b in backends)
              + f"{r['speedup']:>9.1f}x")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
