"""Time each kernel on its numba path against the pure-numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call per kernel compiles (or loads the on-disk cache); that
call is excluded. Outputs of the two paths are compared before timing.
"""

import argparse
import timeit

import numpy as np

from omnifuse.kernels import _numba, _numpy


def cases(rng):
    n_par = 384 * 384
    w, g = rng.normal(size=n_par), rng.normal(size=n_par)
    z = rng.normal(size=(128, 384))
    up = rng.normal(size=z.shape)
    img = rng.normal(size=(64, 8, 16, 16))
    cols = rng.normal(size=(64 * 16 * 16, 8 * 9))
    dist = rng.random(600)
    same = rng.random(600) < 0.5
    a, b = rng.normal(size=(256, 32)), rng.normal(size=(256, 32))

    def adam(mod):
        def run():
            mod.adam_update(w.copy(), g, np.zeros(n_par), np.zeros(n_par), 1e-3, 0.9, 0.999, 1e-8, 1)
        return run

    def elu_b(mod):
        out = mod.elu_forward(z)
        return lambda: mod.elu_backward(z, out, up)

    return {
        "adam_update (147k params)": adam,
        "elu_forward (128x384)": lambda mod: (lambda: mod.elu_forward(z)),
        "elu_backward (128x384)": elu_b,
        "im2col (64x8x16x16, k=3)": lambda mod: (lambda: mod.im2col(img, 3, 1)),
        "col2im (64x8x16x16, k=3)": lambda mod: (lambda: mod.col2im(cols, img.shape, 3, 1)),
        "threshold_sweep (600 pairs)": lambda mod: (lambda: mod.threshold_sweep(dist, same)),
        "cosine_rows (256x32)": lambda mod: (lambda: mod.cosine_rows(a, b)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, make in cases(rng).items():
        f_np, f_nb = make(_numpy), make(_numba)
        f_nb()  # compile / load cache
        t_np = min(timeit.repeat(f_np, number=args.repeat, repeat=3)) / args.repeat * 1e6
        t_nb = min(timeit.repeat(f_nb, number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:<30}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
