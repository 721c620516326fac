"""Benchmark the conv kernel backends at training-typical shapes.

Usage: python benchmarks/bench_kernels.py [--reps N]

Compares the compiled extension against the numpy/BLAS fallback on the
shapes the desk-scale pipeline actually runs: batched 64x64 training
convs and the small 8x8 shapes the gradient checks use.
"""

import argparse
import time

import numpy as np

from segmoe import _pykernels

try:
    from segmoe import _ckernels
except ImportError:
    _ckernels = None

TRAIN_SHAPES = [
    ("enc1 64x64", (8, 3, 64, 64), (16, 3, 3, 3), 1, 1),
    ("enc2 32x32", (8, 16, 32, 32), (32, 16, 3, 3), 1, 1),
    ("mid  32x32", (8, 32, 32, 32), (32, 32, 3, 3), 1, 1),
    ("head 64x64", (8, 48, 64, 64), (8, 48, 3, 3), 1, 1),
]

SMALL_SHAPES = [
    ("grad  8x8", (1, 3, 8, 8), (4, 3, 3, 3), 1, 1),
    ("grad  4x4", (1, 4, 4, 4), (4, 4, 3, 3), 1, 1),
]


def bench(impl, shapes, reps):
    rng = np.random.default_rng(0)
    total = 0.0
    for _, xs, ws, stride, pad in shapes:
        x = rng.normal(size=xs)
        w = rng.normal(size=ws)
        y = impl.conv2d_forward(x, w, stride, pad)
        dy = np.ones_like(y)
        t0 = time.perf_counter()
        for _ in range(reps):
            impl.conv2d_forward(x, w, stride, pad)
            impl.conv2d_backward_input(dy, w, stride, pad, xs[2], xs[3])
            impl.conv2d_backward_weight(dy, x, ws[2], ws[3], stride, pad)
        total += (time.perf_counter() - t0) / reps
    return total


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=5)
    args = parser.parse_args()
    impls = [("python (im2col+BLAS)", _pykernels)]
    if _ckernels is not None:
        impls.append(("cython (direct loops)", _ckernels))
    else:
        print("compiled extension not built; benchmarking fallback only")
    print(f"{'backend':24s} {'train step-equiv':>18s} {'small shapes':>14s}")
    for name, impl in impls:
        train_ms = bench(impl, TRAIN_SHAPES, args.reps) * 1000
        small_us = bench(impl, SMALL_SHAPES, args.reps * 50) * 1e6
        print(f"{name:24s} {train_ms:15.1f} ms {small_us:11.0f} us")


if __name__ == "__main__":
    main()
