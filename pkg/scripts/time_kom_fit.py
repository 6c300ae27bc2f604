"""Time single KOM fits (tune + assemble + solve) on the correct linear design."""

import argparse
import time

import numpy as np

from komsate.kernels import KernelSpec
from komsate.kom import kom_weights
from komsate.simulation import gen_linear


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--degree", type=int, default=3)
    ap.add_argument("--fits", type=int, default=10)
    args = ap.parse_args()
    times, solve_share = [], []
    for r in range(args.fits):
        data, _ = gen_linear(args.n, 2, 1.0, 1.0, np.random.default_rng(r))
        t0 = time.perf_counter()
        sol = kom_weights(data, KernelSpec("polynomial", args.degree), seed=r)
        total = time.perf_counter() - t0
        t1 = time.perf_counter()
        kom_weights(data, KernelSpec("polynomial", args.degree), tuned=sol.tuning)
        solve_share.append((time.perf_counter() - t1) / total)
        times.append(total)
    print(f"n={args.n} d={args.degree}: median {np.median(times):.3f}s, max {np.max(times):.3f}s, "
          f"assemble+solve share {np.median(solve_share):.1%}")


if __name__ == "__main__":
    main()
