"""Timing comparison of the compiled and pure-numpy kernel paths.

Run directly:

    python3 benchmarks/bench_kernels.py [--n 2000000] [--repeats 5]

The compiled column is skipped when OCTCOMPLETE_NUMBA=0 or numba is
unavailable (the active path is then the numpy one on both sides).
"""

import argparse
import time

import numpy as np

from octcomplete import kernels


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(n, repeats):
    rng = np.random.default_rng(0)
    depth = 10
    x = rng.integers(0, 1 << depth, size=n, dtype=np.uint64)
    y = rng.integers(0, 1 << depth, size=n, dtype=np.uint64)
    z = rng.integers(0, 1 << depth, size=n, dtype=np.uint64)
    codes = kernels.interleave3_np(x, y, z)
    feats = rng.standard_normal((n // 8 + 1, 32)).astype(np.float32)
    idx = rng.integers(-1, feats.shape[0], size=n).astype(np.int64)
    rows = rng.standard_normal((n, 32)).astype(np.float32)

    cases = [
        ("interleave3", kernels.interleave3_np, kernels.interleave3,
         lambda f: f(x, y, z)),
        ("deinterleave3", kernels.deinterleave3_np, kernels.deinterleave3,
         lambda f: f(codes)),
        ("gather_rows", kernels.gather_rows_np, kernels.gather_rows,
         lambda f: f(feats, idx)),
        ("scatter_add", kernels.scatter_add_np, kernels.scatter_add,
         lambda f: f(np.zeros_like(feats), idx, rows)),
    ]

    table = [("kernel", "numpy s", "compiled s", "speedup")]
    for name, f_np, f_active, call in cases:
        t_np = timeit(lambda: call(f_np), repeats)
        if kernels.HAVE_NUMBA and f_active is not f_np:
            call(f_active)  # compile outside the timed region
            t_c = timeit(lambda: call(f_active), repeats)
            table.append((name, f"{t_np:.4f}", f"{t_c:.4f}", f"{t_np / t_c:.2f}x"))
        else:
            table.append((name, f"{t_np:.4f}", "-", "-"))

    widths = [max(len(r[i]) for r in table) for i in range(4)]
    for r in table:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2_000_000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    print(f"elements: {args.n}, best of {args.repeats}")
    print(f"compiled path enabled: {kernels.HAVE_NUMBA}")
    bench(args.n, args.repeats)


if __name__ == "__main__":
    main()
