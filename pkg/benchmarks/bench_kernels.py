"""Time the numba kernels against their numpy twins on autoencoder-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from catw import _kernels as K


def cases(rng):
    x = rng.normal(size=(8, 32, 32, 32))
    cols = K.im2col_numpy(x, 3, 1, 1)
    img = rng.uniform(size=(20, 3, 32, 32))
    k1 = np.array([0.054, 0.244, 0.403, 0.244, 0.054])
    yield "im2col 8x32x32x32 k3", lambda: K.im2col_numpy(x, 3, 1, 1), lambda: K._im2col_nb(x, 3, 1, 1)
    yield "col2im 8x32x32x32 k3", lambda: K.col2im_numpy(cols, x.shape, 3, 1, 1), lambda: K._col2im_nb(cols, 8, 32, 32, 32, 3, 1, 1)
    flat = img.reshape(60, 32, 32)
    yield "blur 20x3x32x32 k5", lambda: K.blur_numpy(img, k1), lambda: K._blur_nb(flat, k1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, np_fn, nb_fn in cases(rng):
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat)) * 1e3
        if not K.HAVE_NUMBA:
            print(f"{name:<24}{t_np:>10.2f}{'n/a':>10}{'':>9}")
            continue
        nb_fn()  # compile outside the timed region
        t_nb = min(timeit.repeat(nb_fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_np:>10.2f}{t_nb:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
