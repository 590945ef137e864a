"""Compare the numba and numpy paths of the row-wise kernels.

Shapes mirror the toy model: (batch * tokens) x D rows for layernorm/GELU,
(batch * heads * tokens) x tokens rows for softmax, and a 64 -> 73 image
resize. Prints one line per kernel with both timings, the speedup and the
max absolute difference between the two paths.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from gff import kernels


def _time(fn, args, repeats: int) -> float:
    fn(*args)  # warm-up (triggers numba compilation)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _maxdiff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def cases(batch: int, dim: int, tokens: int, heads: int, dtype):
    rng = np.random.default_rng(0)
    rows = batch * tokens
    x = rng.standard_normal((rows, dim)).astype(dtype)
    g = rng.standard_normal(dim).astype(dtype)
    b = rng.standard_normal(dim).astype(dtype)
    dy = rng.standard_normal((rows, dim)).astype(dtype)
    _, xhat, rstd = kernels.layernorm_fwd_np(x, g, b, dtype(1e-5))
    att = rng.standard_normal((batch * heads * tokens, tokens)).astype(dtype)
    datt = rng.standard_normal(att.shape).astype(dtype)
    y = kernels.softmax_fwd_np(att)
    img = rng.random((64, 64, 3))
    return {
        "layernorm_fwd": (x, g, b, dtype(1e-5)),
        "layernorm_bwd": (dy, xhat, rstd, g),
        "softmax_fwd": (att,),
        "softmax_bwd": (datt, y),
        "gelu_fwd": (x,),
        "gelu_bwd": (dy, x),
        "bilinear_resize": (img, 73, 73),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description="numba vs numpy kernel timings")
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--tokens", type=int, default=65)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = parser.parse_args(argv)
    dtype = np.dtype(args.dtype).type

    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max|diff|':>10}")
    for name, inputs in cases(args.batch, args.dim, args.tokens, args.heads, dtype).items():
        f_np = kernels.get_kernel(name, "numpy")
        f_nb = kernels.get_kernel(name, "numba")
        t_np = _time(f_np, inputs, args.repeats)
        t_nb = _time(f_nb, inputs, args.repeats)
        diff = _maxdiff(f_np(*inputs), f_nb(*inputs))
        print(f"{name:<16} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
