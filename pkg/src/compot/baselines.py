"""Reference methods: whitened truncated SVD, the theoretical-loss ratio
allocator it is usually paired with, and an exhaustive sparse-coding oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .gram import CholeskyFactor, dewhiten_dictionary, whiten


class BaselineError(ValueError):
    pass


@dataclass
class SVDFactors:
    """W_hat = left @ right with left = L^{-T} U_r diag(S_r), right = V_r^T."""

    left: np.ndarray
    right: np.ndarray
    whitened_residual: float

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.left @ self.right


def truncated_whitened_svd(W: np.ndarray, chol: CholeskyFactor, r: int) -> SVDFactors:
    W = np.asarray(W, dtype=np.float64)
    if not 0 < r <= min(W.shape):
        raise BaselineError(f"rank {r} out of range for shape {W.shape}")
    Wt = whiten(chol, W)
    U, S, Vt = np.linalg.svd(Wt, full_matrices=False)
    residual = float(np.sqrt(np.sum(S[r:] ** 2)))
    left = dewhiten_dictionary(chol, U[:, :r] * S[:r])
    return SVDFactors(left, Vt[:r].copy(), residual)


def matched_svd_rank(m: int, n: int, k: int, s: int) -> int:
    """Largest rank whose r(m+n) parameters fit in the m*k + s*n of a (k, s) factorization."""
    return (m * k + s * n) // (m + n)


def theoretical_loss(W: np.ndarray, chol: CholeskyFactor, cr: float) -> float:
    """Frobenius norm of the whitened residual after truncation.

    The rank is int(m*n*cr/(m+n)): ``cr`` acts as the *kept* parameter
    fraction, mirroring the reference allocator this reproduces. A rank of 0
    returns ||L^T W||_F.
    """
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    Wt = whiten(chol, W)
    rank = int(m * n * cr / (m + n))
    S = np.linalg.svd(Wt, compute_uv=False)
    if rank >= S.size:
        return 0.0
    if rank <= 0:
        return float(np.linalg.norm(Wt))
    # residual of the rank-truncated reconstruction, computed from the discarded spectrum
    return float(np.sqrt(np.sum(S[rank:] ** 2)))


def v2_cr_allocation(
    weights: Mapping[str, np.ndarray],
    chols: Mapping[str, CholeskyFactor],
    target_cr: float,
    groups: Mapping[str, str] | None = None,
) -> dict[str, float]:
    """Per-group ratios proportional to 1/log(theoretical loss), summing to |group| * target_cr.

    Losses at or below 1 make the log normalization undefined; that is an
    error here, as it is in the procedure being reproduced.
    """
    groups = groups or {name: "all" for name in weights}
    out: dict[str, float] = {}
    for g in dict.fromkeys(groups[name] for name in weights):
        names = [name for name in weights if groups[name] == g]
        losses = [theoretical_loss(weights[name], chols[name], target_cr) for name in names]
        if any(l <= 1.0 for l in losses):
            raise BaselineError("V2 normalization undefined: a theoretical loss is <= 1")
        inv = [1.0 / math.log(l) for l in losses]
        total = sum(inv)
        for name, v in zip(names, inv):
            out[name] = len(inv) * target_cr * v / total
    return out


def brute_force_sparse_code(D: np.ndarray, w: np.ndarray, s: int) -> tuple[np.ndarray, float]:
    """Exact best s-sparse code by least squares over every support of size s."""
    D = np.asarray(D, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    k = D.shape[1]
    if k > 12:
        raise BaselineError("brute force limited to k <= 12")
    s = min(s, k)
    if s <= 0:
        return np.zeros(k), float(np.linalg.norm(w))
    best_code, best_res = np.zeros(k), float(np.linalg.norm(w))
    for supp in itertools.combinations(range(k), s):
        cols = list(supp)
        coef, *_ = np.linalg.lstsq(D[:, cols], w, rcond=None)
        res = float(np.linalg.norm(w - D[:, cols] @ coef))
        if res < best_res:
            best_res = res
            best_code = np.zeros(k)
            best_code[cols] = coef
    return best_code, best_res
