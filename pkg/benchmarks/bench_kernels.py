"""Time the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--n 30,200] [--steps 2000]

The numba path is warmed up once before timing so compilation is excluded.
Each row reports the best of ``--repeat`` runs and checks that both paths
agree to round-off. The Euler kernels loop over the dense adjacency, so
numba wins clearly at desk graph sizes while numpy's BLAS matvec catches
up on larger graphs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from coefflow import _kernels as K
from coefflow.graphs import generate_ba


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n: int, steps: int, rng):
    A = generate_ba(n, 3, 0).adjacency
    x0 = rng.uniform(0.01, 0.1, n)
    yield "euler_sis", (lambda nb: K.euler_sis(A, x0, 0.05, 0.3, 0.05, steps, use_numba=nb)[0])
    yield "euler_hill", (lambda nb: K.euler_hill(A, x0 + 1.0, 0.5, 2.0, 1.0, 0.01, steps, use_numba=nb)[0])
    # rows are (batch, node) pairs: (R, T, C_in) input, (C_out, C_in, k) kernel
    x = rng.standard_normal((16 * n, 50, 8))
    w = rng.standard_normal((16, 8, 3))
    g = rng.standard_normal((16 * n, 48, 16))
    yield "conv1d_forward", (lambda nb: K.conv1d_forward(x, w, use_numba=nb))
    yield "conv1d_backward", (lambda nb: np.concatenate([a.ravel() for a in K.conv1d_backward(x, w, g, use_numba=nb)]))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--n", default="30,200", help="comma-separated graph sizes")
    p.add_argument("--steps", type=int, default=2000, help="Euler steps")
    args = p.parse_args(argv)
    if not K.USE_NUMBA:
        print("numba unavailable or disabled; timing the numpy path only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'n':>5}{'numpy s':>12}{'numba s':>12}{'speedup':>10}  max|diff|")
    rows = [(n, name, fn) for n in (int(v) for v in args.n.split(",")) for name, fn in cases(n, args.steps, rng)]
    for n, name, fn in rows:
        ref = fn(False)
        t_np = best_of(lambda: fn(False), args.repeat)
        if K.USE_NUMBA:
            out = fn(True)  # warm-up compiles
            t_nb = best_of(lambda: fn(True), args.repeat)
            diff = float(np.max(np.abs(out - ref)))
            print(f"{name:<18}{n:>5}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>10.2f}  {diff:.2e}")
        else:
            print(f"{name:<18}{n:>5}{t_np:>12.4f}{'-':>12}{'-':>10}  -")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
