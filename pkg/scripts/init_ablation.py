"""SVD vs random dictionary initialization on rank-plus-noise matrices."""

import argparse

import numpy as np

from compot.factorizer import FactorizerConfig, factorize


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--m", type=int, default=32)
    ap.add_argument("--n", type=int, default=48)
    ap.add_argument("--rank", type=int, default=8)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--k", type=int, default=16)
    ap.add_argument("--s", type=int, default=8)
    ap.add_argument("--iters", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    curves = {"svd": [], "random": []}
    for seed in range(args.seeds):
        W = rng.standard_normal((args.m, args.rank)) @ rng.standard_normal((args.rank, args.n))
        W += args.noise * rng.standard_normal((args.m, args.n))
        for init in curves:
            _, _, tr = factorize(W, FactorizerConfig(init=init, seed=seed, max_iterations=args.iters), args.k, args.s)
            curves[init].append(np.array(tr.losses) / np.sum(W ** 2))

    print("iter   svd(median rel. loss)   random(median rel. loss)")
    for t in range(args.iters):
        print(f"{t + 1:4d}   {np.median([c[t] for c in curves['svd']]):.5f}"
              f"               {np.median([c[t] for c in curves['random']]):.5f}")
    wins = sum(a[-1] <= b[-1] for a, b in zip(curves["svd"], curves["random"]))
    print(f"svd init ends at or below random init on {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
