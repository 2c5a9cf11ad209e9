"""Throughput comparison of the numba and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--size 128] [--repeats 5]

The numba variants are compiled once before timing.  The same kernels can be
forced at package level with NSF_BACKEND=numpy|numba (see nsf.backend).
"""

import argparse
import time

import numpy as np

from nsf._kernels import IMPLEMENTATIONS


def bench(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--size", type=int, default=128, help="volume edge length")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    n = args.size
    rng = np.random.default_rng(0)
    data = np.asfortranarray(rng.random((n, n, n)))
    labels = np.asfortranarray(rng.integers(0, 38, (n, n, n), dtype=np.int32))
    m = int(n * 1.2) ** 3  # upsampling-style coordinate count
    xs = rng.uniform(-1, n, m)
    ys = rng.uniform(-1, n, m)
    zs = rng.uniform(-1, n, m)
    idx = rng.integers(0, 38, n**3).astype(np.int32)
    means = rng.uniform(0, 255, 38)
    stds = rng.uniform(1, 30, 38)
    noise = rng.standard_normal(n**3)

    cases = {
        "trilinear_gather": (data, xs, ys, zs, 0.0, True),
        "nearest_gather": (labels, xs, ys, zs, np.int32(0), True),
        "gmm_synthesize": (idx, means, stds, noise),
    }

    if "numba" in IMPLEMENTATIONS:
        for name, case_args in cases.items():
            IMPLEMENTATIONS["numba"][name](*case_args)  # compile outside the timer

    header = f"{'kernel':<20}" + "".join(f"{b:>12}" for b in IMPLEMENTATIONS) + f"{'speedup':>10}"
    print(f"volume {n}^3, {m / 1e6:.1f}M gather points, best of {args.repeats}")
    print(header)
    print("-" * len(header))
    for name, case_args in cases.items():
        times = {b: bench(impl[name], case_args, args.repeats) for b, impl in IMPLEMENTATIONS.items()}
        row = f"{name:<20}" + "".join(f"{times[b] * 1e3:>10.1f}ms" for b in IMPLEMENTATIONS)
        if "numba" in times and "numpy" in times:
            row += f"{times['numpy'] / times['numba']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
