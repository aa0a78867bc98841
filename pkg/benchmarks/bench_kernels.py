"""Time the tabular solver kernels: numba loops against the numpy versions.

    python benchmarks/bench_kernels.py [--sizes 5 10 20 50] [--repeat 5]

Both versions receive identical inputs; the script checks that they agree
before reporting timings. The first numba call (compilation, or loading the
on-disk cache) is excluded.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from alam import _kernels
from alam.tabular import random_problem


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def pg_args(n, rng):
    pr = random_problem(rng, n)
    lam = rng.uniform(0.0, 1.0, n)
    rho = 2.0
    return (pr.Q, pr.b, pr.A, pr.c, lam, rho, pr.lo, pr.hi, np.zeros(n), 1.0 / pr.lipschitz(rho),
            1e-12, 200_000)


def hildreth_args(n, rng):
    M = rng.standard_normal((n, n))
    P = M @ M.T + n * np.eye(n)
    return (P, rng.standard_normal(n), np.diag(P).copy(), np.zeros(n), 1e-13, 200_000)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[5, 10, 20, 50])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not _kernels.HAVE_NUMBA:
        print("numba unavailable (or ALAM_DISABLE_NUMBA set): only the numpy kernels exist")
        return 1

    pairs = [
        ("projected_gradient", pg_args, _kernels._pg_loops, _kernels._pg_numpy),
        ("hildreth", hildreth_args, _kernels._hildreth_loops, _kernels._hildreth_numpy),
    ]
    print(f"{'kernel':<20} {'n':>4} {'iters':>7} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, make, fast, slow in pairs:
        for n in args.sizes:
            a = make(n, np.random.default_rng(args.seed + n))
            fast(*a)  # compile or load from cache
            t_fast, (x_fast, _, k_fast) = best_of(fast, a, args.repeat)
            t_slow, (x_slow, _, k_slow) = best_of(slow, a, args.repeat)
            err = float(np.max(np.abs(x_fast - x_slow)))
            if err > 1e-9:
                raise SystemExit(f"{name} n={n}: kernels disagree by {err:.2e}")
            print(f"{name:<20} {n:>4} {k_fast:>7} {1e3 * t_fast:>10.3f} {1e3 * t_slow:>10.3f} "
                  f"{t_slow / t_fast:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
