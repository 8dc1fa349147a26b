"""Compares the compiled kernels against the numpy/BLAS implementation across
batch sizes.

The compiled loops win on small batches, where GEMM dispatch and im2col
copies dominate; BLAS wins once batches are large. The crossover motivates
the auto backend's small-batch cutoff in gracile.kernels.

Run:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from gracile import _kernels_np as npk
from gracile import kernels

try:
    from gracile import _kernels as ext
except ImportError:
    ext = None


def bench(fn, *args, min_time=0.3):
    fn(*args)  # warm up
    reps = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(*args)
        dt = time.perf_counter() - t0
        if dt > min_time:
            return dt / reps * 1e3
        reps *= 4


def main():
    print(f"backend mode: {kernels.backend_name()}")
    if ext is None:
        print("compiled kernels not built; numpy timings only")
    rng = np.random.default_rng(0)
    w = rng.normal(0, 0.3, (20, 10, 5, 5)).astype(np.float32)
    b = np.zeros(20, np.float32)
    wf = rng.normal(0, 0.3, (50, 320)).astype(np.float32)
    bf = np.zeros(50, np.float32)

    print(f"\n{'op':<22}{'batch':>6}{'numpy ms':>12}{'compiled ms':>13}{'winner':>9}")
    for batch in (1, 2, 4, 8, 16, 64, 256, 1000):
        x = rng.normal(0, 1, (batch, 10, 12, 12)).astype(np.float32)
        t_np = bench(npk.conv2d, x, w, b, (2, 2), (0, 0))
        row = f"{'conv2d 10->20 5x5/2':<22}{batch:>6}{t_np:>12.3f}"
        if ext is not None:
            t_ext = bench(ext.conv2d, x, w, b, (2, 2), (0, 0))
            row += f"{t_ext:>13.3f}{'ext' if t_ext < t_np else 'numpy':>9}"
        print(row)
    for batch in (1, 2, 4, 8, 16, 64, 256, 1000):
        x = rng.normal(0, 1, (batch, 320)).astype(np.float32)
        t_np = bench(npk.fully_connected, x, wf, bf)
        row = f"{'dense 320->50':<22}{batch:>6}{t_np:>12.3f}"
        if ext is not None:
            t_ext = bench(ext.fully_connected, x, wf, bf)
            row += f"{t_ext:>13.3f}{'ext' if t_ext < t_np else 'numpy':>9}"
        print(row)


if __name__ == "__main__":
    main()
