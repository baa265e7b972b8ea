"""Time the compiled kernels against the numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py``; prints one line per kernel.
"""
import time

import numpy as np

from echoscape import _kernels_py as py

try:
    from echoscape import _kernels as cy
except ImportError:
    cy = None


def best_of(fn, repeat=7):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    rng = np.random.default_rng(0)
    img = rng.random((128, 64))
    rows = rng.uniform(-2, 130, (128, 64))
    cols = rng.uniform(-2, 66, (128, 64))
    x = rng.random((16, 16, 128, 64), dtype=np.float32)
    cases = {
        "bilinear_sample 128x64": (
            lambda m: m.bilinear_sample(img, rows, cols, 0.0)),
        "im2col 16x16x128x64 k5x3": (
            lambda m: m.im2col(x, 5, 3, 1, 2, 2, 1, 1)),
    }
    cols_buf = py.im2col(x, 5, 3, 1, 2, 2, 1, 1)
    cases["col2im 16x16x128x64 k5x3"] = (
        lambda m: m.col2im(cols_buf, 16, 128, 64, 5, 3, 1, 2, 2, 1, 1))
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_py = best_of(lambda: fn(py)) * 1e3
        if cy is None:
            print(f"{name:28s} {t_py:10.3f} {'n/a':>10s} {'n/a':>8s}")
            continue
        t_cy = best_of(lambda: fn(cy)) * 1e3
        print(f"{name:28s} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:8.2f}")


if __name__ == "__main__":
    main()
