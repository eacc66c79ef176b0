"""Benchmark the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from dvio.kernels import numpy_backend
from dvio.so3 import exp_so3

try:
    from dvio.kernels import _ext
except ImportError:
    _ext = None


def _time(fn, repeats):
    fn()                          # warm up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, size=(480, 640))
    grad_y, grad_x = np.gradient(img)

    n = 4000
    x = rng.uniform(0, 639, n)
    y = rng.uniform(0, 479, n)
    pts = np.stack([rng.uniform(-1, 1, n), rng.uniform(-0.8, 0.8, n),
                    rng.uniform(1.0, 4.0, n)], axis=1)
    ref = rng.uniform(0, 255, n)
    R = exp_so3(np.array([0.01, -0.02, 0.005]))
    t = np.array([0.05, -0.02, 0.01])

    s, p = 256, 9
    px = rng.uniform(4, 635, s)
    py = rng.uniform(4, 475, s)
    du = rng.uniform(-2, 2, p)
    dv = rng.uniform(-2, 2, p)
    pat = rng.uniform(0, 255, p)

    cases = {
        "bilinear (4k pts)": lambda b: b.bilinear(img, x, y),
        "tracking_terms (4k pts)": lambda b: b.tracking_terms(
            img, grad_x, grad_y, pts, ref, R, t, 300.0, 300.0, 319.5, 239.5),
        "ssd_scores (256x9)": lambda b: b.ssd_scores(img, px, py, du, dv, pat),
    }

    print(f"{'kernel':<26}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for name, call in cases.items():
        t_np = _time(lambda: call(numpy_backend), args.repeats) * 1e3
        if _ext is None:
            print(f"{name:<26}{t_np:>12.3f}{'n/a':>13}{'n/a':>9}")
            continue
        t_cy = _time(lambda: call(_ext), args.repeats) * 1e3
        print(f"{name:<26}{t_np:>12.3f}{t_cy:>13.3f}{t_np / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
