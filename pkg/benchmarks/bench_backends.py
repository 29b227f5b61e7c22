"""Timing comparison of the numba and numpy kernel backends.

Imports both implementations directly (bypassing the env-var dispatch)
and times each primitive on identical inputs, so a run also doubles as
a cross-backend agreement check.

Usage: python3 benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from diffmorph.kernels import numba_ops, numpy_ops


def _time(fn, args, repeats):
    fn(*args)  # warmup; compiles the numba kernels
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _cases():
    rng = np.random.default_rng(0)
    f32 = lambda *shape: rng.standard_normal(shape).astype(np.float32)

    # training-shaped convolution: batch 8 at 32x32, 3x3 kernels, pad 1
    xp = np.pad(f32(8, 16, 32, 32), ((0, 0), (0, 0), (1, 1), (1, 1)))
    w = f32(16, 16, 3, 3)
    dy = f32(8, 16, 32, 32)
    w2 = f32(32, 16, 3, 3)
    dy2 = f32(8, 32, 16, 16)

    img = f32(8, 1, 32, 32)
    field = (0.5 * f32(8, 2, 32, 32)).astype(np.float32)
    gimg = f32(8, 1, 32, 32)

    big = f32(1, 1, 256, 256)
    bfield = (2.0 * f32(1, 2, 256, 256)).astype(np.float32)
    bg = f32(1, 1, 256, 256)

    return [
        ("conv_fwd 8x16x32^2 k3 s1", "conv_fwd", (xp, w, 1, 32, 32)),
        ("conv_fwd 8x16x32^2 k3 s2", "conv_fwd", (xp, w2, 2, 16, 16)),
        ("conv_dw  8x16x32^2 k3 s1", "conv_dw", (xp, dy, 1, 3)),
        ("conv_dw  8x16x32^2 k3 s2", "conv_dw", (xp, dy2, 2, 3)),
        ("warp_bilinear 8x32^2", "warp_bilinear", (img, field)),
        ("warp_bilinear 1x256^2", "warp_bilinear", (big, bfield)),
        ("warp_grad 8x32^2", "warp_bilinear_grad", (img, field, gimg)),
        ("warp_grad 1x256^2", "warp_bilinear_grad", (big, bfield, bg)),
        ("warp_nearest 1x256^2", "warp_nearest", (big, bfield)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    print("%-28s %10s %10s %8s %10s" % ("kernel/shape", "numba", "numpy",
                                        "speedup", "agreement"))
    for label, name, call_args in _cases():
        t_nb = _time(getattr(numba_ops, name), call_args, args.repeats)
        t_np = _time(getattr(numpy_ops, name), call_args, args.repeats)
        out_nb = getattr(numba_ops, name)(*call_args)
        out_np = getattr(numpy_ops, name)(*call_args)
        if isinstance(out_nb, tuple):
            diff = max(float(np.abs(a - b).max())
                       for a, b in zip(out_nb, out_np))
        else:
            diff = float(np.abs(out_nb - out_np).max())
        print("%-28s %8.3f ms %8.3f ms %7.1fx %10.2e"
              % (label, t_nb * 1e3, t_np * 1e3, t_np / t_nb, diff))


if __name__ == "__main__":
    main()
