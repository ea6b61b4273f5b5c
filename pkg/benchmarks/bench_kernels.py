"""Compiled vs numpy convolution kernels.

Times im2col and col2im at the shapes the default PlacesNet uses for a
training batch of 64, then prints a summary line comparing the backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--dtype float32]
"""
import argparse
import sys
import timeit

import numpy as np

from fosnet import kernels

# (batch, h, w, c_in, kernel, stride, pad) for the three default blocks
SHAPES = [(64, 32, 32, 3, 3, 2, 1), (64, 16, 16, 16, 3, 2, 1), (64, 8, 8, 32, 3, 2, 1)]


def bench(mod, x, k, stride, pad, repeat):
    cols = mod.im2col(x, k, k, stride, pad)
    t_fwd = min(timeit.repeat(lambda: mod.im2col(x, k, k, stride, pad), number=1, repeat=repeat))
    t_bwd = min(timeit.repeat(lambda: mod.col2im(cols, x.shape, k, k, stride, pad), number=1, repeat=repeat))
    return t_fwd, t_bwd


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args(argv)
    compiled = kernels.compiled_backend()
    if compiled is None:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    tot = {"python": 0.0, "cython": 0.0}
    print(f"{'shape':<28}{'op':<8}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for b, h, w, c, k, s, p in SHAPES:
        x = rng.normal(size=(b, h, w, c)).astype(args.dtype)
        py = bench(kernels.python_backend, x, k, s, p, args.repeat)
        cy = bench(compiled, x, k, s, p, args.repeat)
        for name, tp, tc in (("im2col", py[0], cy[0]), ("col2im", py[1], cy[1])):
            tot["python"] += tp
            tot["cython"] += tc
            print(f"{str((b, h, w, c)):<28}{name:<8}{tp * 1e3:>11.3f}{tc * 1e3:>11.3f}{tp / tc:>8.2f}x")
    print(f"total per training step (forward+backward kernels): python {tot['python'] * 1e3:.2f} ms, "
          f"cython {tot['cython'] * 1e3:.2f} ms, speedup {tot['python'] / tot['cython']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
