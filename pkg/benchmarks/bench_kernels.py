"""Benchmark the compiled kernel backend against the numpy fallback.

Usage:
    python3 benchmarks/bench_kernels.py [--n 2048] [--repeats 5]

Both backends are imported directly (bypassing the FDMPOSE_KERNELS env
selection) so a single run compares them side by side and verifies that
their outputs agree exactly.
"""

import argparse
import time

import numpy as np

from fdmpose.kernels import numpy_backend

try:
    from fdmpose.kernels import _fastkern
except ImportError:
    _fastkern = None


def _timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2048, help="point count")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.1, 0.1, (args.n, 3))
    query = rng.uniform(-0.1, 0.1, (args.n, 3))
    cam_pts = pts + np.array([0.0, 0.0, 0.5])

    cases = [
        ("nearest_neighbor", lambda b: b.nearest_neighbor(query, pts)),
        ("knn k=16", lambda b: b.knn(query, pts, 16)),
        ("fps k=128", lambda b: b.fps(pts, 128)),
        ("zbuffer 64x64", lambda b: b.zbuffer(cam_pts, 80.0, 80.0, 32.0,
                                              32.0, 64, 64)),
    ]

    backends = [("numpy", numpy_backend)]
    if _fastkern is not None:
        backends.append(("cython", _fastkern))
    else:
        print("compiled extension not available; benchmarking numpy only")

    print(f"n = {args.n}, best of {args.repeats}")
    header = f"{'kernel':<20}" + "".join(f"{n:>12}" for n, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}{'match':>8}"
    print(header)
    for name, call in cases:
        times, outs = [], []
        for _, mod in backends:
            t, out = _timeit(lambda m=mod: call(m), args.repeats)
            times.append(t)
            outs.append(out)
        row = f"{name:<20}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(backends) == 2:
            a, b = outs
            if isinstance(a, tuple):
                # indices must agree exactly; distances may differ in the
                # last ulp from summation order
                same = (np.array_equal(a[0], b[0])
                        and np.allclose(a[1], b[1], atol=1e-12))
            else:
                same = np.array_equal(a, b)
            row += f"{times[0] / times[1]:>9.1f}x{'yes' if same else 'NO':>8}"
        print(row)


if __name__ == "__main__":
    main()
