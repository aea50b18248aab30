"""Compare the compiled kernels against the numpy fallback.

Run:  python3 benchmarks/bench_kernels.py

Shapes mirror the real workloads: 28x28 grayscale character batches and the
8x8 synthetic layout, at the channel widths the embedding stack uses.
"""

import time

import numpy as np

from fewgraph.backend import _ckernels as ext
from fewgraph.backend import numpy_kernels as nk

CASES = [
    ("conv 6x1x28x28 k64", (6, 1, 28, 28), 64),
    ("conv 6x64x14x14 k64", (6, 64, 14, 14), 64),
    ("conv 6x64x7x7 k64", (6, 64, 7, 7), 64),
    ("conv 26x8x8x8 k8", (26, 8, 8, 8), 8),
    ("conv 16x64x28x28 k64", (16, 64, 28, 28), 64),
]


def timeit(fn, *args, reps=5):
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    print(f"{'case':24s} {'numpy':>10s} {'ext':>10s} {'ratio':>7s}")
    for name, shape, f in CASES:
        x = rng.normal(size=shape)
        k = rng.normal(size=(f, shape[1], 3, 3))
        g = rng.normal(size=(shape[0], f, shape[2], shape[3]))
        for suffix, np_fn, ext_fn, args in (
            ("fwd", nk.conv3x3_forward, ext.conv3x3_forward, (x, k)),
            ("gin", nk.conv3x3_grad_input, ext.conv3x3_grad_input, (g, k)),
            ("gk", nk.conv3x3_grad_kernel, ext.conv3x3_grad_kernel, (g, x)),
        ):
            tn = timeit(np_fn, *args)
            te = timeit(ext_fn, *args)
            print(f"{name + ' ' + suffix:24s} {tn * 1e3:9.3f}m {te * 1e3:9.3f}m {tn / te:6.2f}x")
    for name, shape in (("pool 6x64x28x28", (6, 64, 28, 28)), ("pool 26x8x8x8", (26, 8, 8, 8))):
        x = rng.normal(size=shape)
        tn = timeit(nk.maxpool2_forward, x)
        te = timeit(ext.maxpool2_forward, x)
        print(f"{name + ' fwd':24s} {tn * 1e3:9.3f}m {te * 1e3:9.3f}m {tn / te:6.2f}x")


if __name__ == "__main__":
    main()
