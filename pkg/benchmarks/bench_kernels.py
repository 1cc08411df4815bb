"""Compare the compiled and numpy kernel backends.

Run: python3 benchmarks/bench_kernels.py [--rows N] [--repeat R]
"""

import argparse
import timeit

import numpy as np

from bespokemlp import _kernels_py

try:
    from bespokemlp import _kernels
except ImportError:  # extension not built
    _kernels = None


def forward_args(rows: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    d, h, k = 16, 10, 10
    x = rng.integers(0, 16, (rows, d)).astype(np.int64)
    w0 = rng.integers(-127, 128, (h, d)).astype(np.int64)
    w1 = rng.integers(-127, 128, (k, h)).astype(np.int64)
    b0 = rng.integers(-500, 500, h).astype(np.int64)
    b1 = rng.integers(-500, 500, k).astype(np.int64)
    wide = lambda n: np.full(n, 40, np.int64)
    return (x, w0, b0, 0, wide(h), 4, 8, w1, b1, 0, wide(k))


def bench(fn, args, repeat: int) -> float:
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--rows", type=int, default=20000)
    p.add_argument("--points", type=int, default=400)
    p.add_argument("--repeat", type=int, default=5)
    a = p.parse_args(argv)

    fargs = forward_args(a.rows)
    pts = (np.random.default_rng(1).random((a.points, 2)),)
    cases = [("forward_batch", fargs), ("nondominated_ranks", pts)]
    print(f"{'kernel':<20}{'python (s)':>12}{'cython (s)':>12}{'speedup':>10}")
    for name, args in cases:
        t_py = bench(getattr(_kernels_py, name), args, a.repeat)
        if _kernels is None:
            print(f"{name:<20}{t_py:>12.4f}{'n/a':>12}{'n/a':>10}")
            continue
        ref, got = getattr(_kernels_py, name)(*args), getattr(_kernels, name)(*args)
        for r, g in zip(ref if isinstance(ref, tuple) else (ref,), got if isinstance(got, tuple) else (got,)):
            assert np.array_equal(np.asarray(r), np.asarray(g)), f"{name}: backends disagree"
        t_cy = bench(getattr(_kernels, name), args, a.repeat)
        print(f"{name:<20}{t_py:>12.4f}{t_cy:>12.4f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
