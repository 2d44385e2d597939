"""Compare the compiled and pure-numpy point-cloud kernels.

Usage: python benchmarks/bench_kernels.py [--repeat 5] [--sizes 256 1024 4096]

Prints one row per kernel and cloud size with the best-of-N wall time of
each backend and the speed-up. Both backends are checked for identical
outputs before timing.
"""

import argparse
import timeit

import numpy as np

from trafficflow import kernels


def cases(n, rng):
    pts = rng.uniform(-40, 40, (n, 3))
    other = rng.uniform(-40, 40, (n, 3))
    return {
        "knn_indices(k=16)": lambda impl: kernels.knn_indices(pts, other, 16, impl=impl),
        "farthest_point_sampling(n/4)": lambda impl: kernels.farthest_point_sampling(pts, n // 4, impl=impl),
        "voxelize_2d(64x64)": lambda impl: kernels.voxelize_2d(pts, (-40.0, -40.0), 1.25, (64, 64), impl=impl),
        "gaussian_kde": lambda impl: kernels.gaussian_kde(pts, 1.0, impl=impl),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--sizes", type=int, nargs="+", default=[256, 1024, 4096])
    args = parser.parse_args(argv)

    try:
        kernels._resolve("cython")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'N':>6} {'cython ms':>10} {'python ms':>10} {'speed-up':>9}")
    for n in args.sizes:
        for name, fn in cases(n, rng).items():
            a, b = fn("cython"), fn("python")
            if not np.array_equal(a, b) and not np.allclose(a, b, rtol=1e-12, atol=0):
                raise AssertionError(f"{name}: backends disagree at N={n}")
            t_c = min(timeit.repeat(lambda: fn("cython"), number=1, repeat=args.repeat)) * 1e3
            t_p = min(timeit.repeat(lambda: fn("python"), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<30} {n:>6} {t_c:>10.2f} {t_p:>10.2f} {t_p / t_c:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
