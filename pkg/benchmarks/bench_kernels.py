"""Timing comparison of the numba-compiled kernels against their
pure-numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

The numba variants are what the package uses by default; setting
FLIPDISTILL_NO_NUMBA=1 at import time swaps in the numpy versions, so
this script must run *without* that flag to see both sides.
"""

import time

import numpy as np

from flipdistill import kernels as K


def bench(fn, *args, repeat=200):
    fn(*args)  # warmup (JIT compile on the numba side)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def main():
    if not K.USE_NUMBA:
        print("warning: FLIPDISTILL_NO_NUMBA is set; both columns are the "
              "numpy fallback")

    rng = np.random.default_rng(0)
    sizes = [1024, 16384, 262144]
    rows = []
    for n in sizes:
        g = rng.normal(size=n) * 3
        rows.append((f"clip_values[{n}]",
                     bench(K.clip_values, g.copy(), -1.0, 1.0),
                     bench(K.clip_values_numpy, g.copy(), -1.0, 1.0)))

        p, m, v = rng.normal(size=n), np.zeros(n), np.zeros(n)
        args = (g.copy(), 1, 1e-3, 0.9, 0.999, 1e-8, 0.1)
        rows.append((f"adamw_step[{n}]",
                     bench(K.adamw_step, p.copy(), args[0], m.copy(), v.copy(), *args[1:]),
                     bench(K.adamw_step_numpy, p.copy(), args[0], m.copy(), v.copy(), *args[1:])))

        rows.append((f"sgd_step[{n}]",
                     bench(K.sgd_step, p.copy(), g.copy(), 1e-2, 0.1),
                     bench(K.sgd_step_numpy, p.copy(), g.copy(), 1e-2, 0.1)))

    for shape in [(64, 64), (256, 256), (1024, 128)]:
        x = rng.normal(size=shape)
        rows.append((f"softmax_rows[{shape[0]}x{shape[1]}]",
                     bench(K.softmax_rows, x),
                     bench(K.softmax_rows_numpy, x.copy())))
        y = K.softmax_rows_numpy(x.copy())
        gy = rng.normal(size=shape)
        rows.append((f"softmax_backward[{shape[0]}x{shape[1]}]",
                     bench(K.softmax_rows_backward, y, gy),
                     bench(K.softmax_rows_backward_numpy, y, gy)))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numba (us)':>12}  {'numpy (us)':>12}  {'speedup':>8}")
    for name, tn, tp in rows:
        print(f"{name:<{width}}  {tn * 1e6:>12.2f}  {tp * 1e6:>12.2f}  "
              f"{tp / tn:>7.2f}x")


if __name__ == "__main__":
    main()
