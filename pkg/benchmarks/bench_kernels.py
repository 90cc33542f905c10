"""Compiled vs numpy kernel timings.

Usage: python benchmarks/bench_kernels.py [--paths 2000] [--steps 4000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from reclq import kernels
from reclq.weight import brownian_increments


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--paths", type=int, default=2000)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    backends = ["numpy"] + (["cython"] if kernels._compiled is not None else [])
    dt = 1e-3
    dW = brownian_increments(0, np.arange(args.paths), args.steps, dt)
    print(f"{args.paths} paths x {args.steps} steps, best of {args.repeat}")
    print(f"{'kernel':<22}{'n':>3}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for n in (1, 3):
        rng = np.random.default_rng(n)
        A = -np.eye(n) + 0.2 * rng.normal(size=(n, n))
        C = 0.2 * rng.normal(size=(n, n))
        drift = np.zeros((args.steps, n))
        diff = np.zeros((args.steps, n))
        cases = {
            "euler_affine": lambda b: kernels.euler_affine(np.ones(n), A, C, drift, diff, dW,
                                                           dt, backend=b),
            "lyapunov_accumulate": lambda b: kernels.lyapunov_accumulate(
                A, C, np.eye(n), dW, dt, 1.5, 0.5, backend=b),
        }
        for name, fn in cases.items():
            t = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
            speed = f"{t['numpy'] / t['cython']:>9.1f}x" if "cython" in t else f"{'-':>10}"
            print(f"{name:<22}{n:>3}" + "".join(f"{t[b]:>11.3f}s" for b in backends) + speed)


if __name__ == "__main__":
    main()
