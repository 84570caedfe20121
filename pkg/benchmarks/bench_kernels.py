"""Compiled vs numpy kernels: im2col, col2im, min filter, and a conv layer built on them.

    python benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import timeit

import numpy as np

from ampdehaze import kernels
from ampdehaze.tensorcore import Conv2d


def _best(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if kernels._ext is None:
        print("compiled extension not built; only the numpy path is available")
        return
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((4, 16, 34, 34)).astype(np.float32)
    cols = kernels.im2col_numpy(xp, 3, 3, 1)
    img = rng.random((64, 64)).astype(np.float32)
    ext = kernels._ext
    cases = [
        ("im2col 4x16x32x32 k3", lambda: ext.im2col(xp, 3, 3, 1), lambda: kernels.im2col_numpy(xp, 3, 3, 1)),
        ("col2im 4x16x32x32 k3", lambda: ext.col2im(cols, 16, 34, 34, 3, 3, 1),
         lambda: kernels.col2im_numpy(cols, 16, 34, 34, 3, 3, 1)),
        ("min_filter 64x64 w15", lambda: ext.min_filter2d(img, 15), lambda: kernels.min_filter2d_numpy(img, 15)),
    ]
    print(f"{'kernel':24s} {'compiled ms':>12s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fast, slow in cases:
        a, b = fast(), slow()
        if not np.allclose(a, b, atol=1e-5):
            raise SystemExit(f"{name}: backends disagree")
        tc, tn = _best(fast, args.repeat), _best(slow, args.repeat)
        print(f"{name:24s} {tc:12.3f} {tn:10.3f} {tn / tc:7.2f}x")

    # whole conv layer, switching the dispatcher's backend in place
    conv = Conv2d(16, 16, 3, pad=1, rng=rng)
    x = xp[:, :, 1:-1, 1:-1].copy()

    def step():
        y, cache = conv.forward(x)
        conv.backward(y, cache)

    tc = _best(step, args.repeat)
    kernels._ext = None
    try:
        tn = _best(step, args.repeat)
    finally:
        kernels._ext = ext
    print(f"{'conv3x3 fwd+bwd':24s} {tc:12.3f} {tn:10.3f} {tn / tc:7.2f}x")


if __name__ == "__main__":
    main()
