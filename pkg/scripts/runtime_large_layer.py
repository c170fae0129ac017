"""Time one factorization of a 2048 x 8192 matrix at static CR 0.2, k/s = 2, 20 iterations."""

import argparse
import time

import numpy as np

from compot.factorizer import FactorizerConfig, factorize, solve_ks
from compot.gram import cholesky, dewhiten_dictionary, whiten


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--m", type=int, default=2048)
    ap.add_argument("--n", type=int, default=8192)
    ap.add_argument("--cr", type=float, default=0.2)
    ap.add_argument("--iters", type=int, default=20)
    ap.add_argument("--tokens", type=int, default=4096)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    W = (rng.standard_normal((args.m, args.n)) / np.sqrt(args.m)).astype(np.float32)
    X = rng.standard_normal((args.tokens, args.m)).astype(np.float32)
    k, s = solve_ks(args.m, args.n, args.cr, 2)
    print(f"{args.m}x{args.n}  k={k} s={s}")

    t0 = time.perf_counter()
    chol = cholesky(X.T.astype(np.float64) @ X.astype(np.float64))
    Wt = whiten(chol, W)
    D, codes, trace = factorize(Wt, FactorizerConfig(max_iterations=args.iters), k, s)
    dewhiten_dictionary(chol, D)
    elapsed = time.perf_counter() - t0
    print(f"loss {trace.losses[0]:.4e} -> {trace.losses[-1]:.4e} in {trace.iterations_run} iterations")
    print(f"elapsed {elapsed:.1f} s ({elapsed / trace.iterations_run:.2f} s/iteration)")


if __name__ == "__main__":
    main()
