"""Orthogonal-dictionary sparse factorization of a whitened weight matrix.

Alternates exact hard-threshold sparse coding with an orthogonal Procrustes
dictionary update. All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal

import numpy as np


class FactorizerError(ValueError):
    pass


class BudgetTooTight(FactorizerError):
    pass


def as_fraction(x) -> Fraction:
    """Exact rational for a user-facing decimal (0.2 -> 1/5, not the binary float)."""
    if isinstance(x, (Fraction, int)):
        return Fraction(x)
    return Fraction(str(float(x)))


@dataclass
class FactorizerConfig:
    ks_ratio: float = 2.0
    max_iterations: int = 20
    init: Literal["svd", "random"] = "svd"
    seed: int = 0
    early_stop_tol: float | None = None
    sign_fix: bool = True

    def __post_init__(self):
        if as_fraction(self.ks_ratio) <= 1:
            raise FactorizerError("ks_ratio must exceed 1")
        if self.max_iterations < 1:
            raise FactorizerError("max_iterations must be positive")
        if self.init not in ("svd", "random"):
            raise FactorizerError(f"unknown init mode {self.init!r}")


@dataclass
class SparseCodes:
    """k x n codes; ``mask`` marks the stored support (at most s per column)."""

    values: np.ndarray
    mask: np.ndarray
    s: int

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def dense(self) -> np.ndarray:
        return np.where(self.mask, self.values, 0.0)


@dataclass
class FactorizationTrace:
    losses: list[float] = field(default_factory=list)
    iterations_run: int = 0
    stop_reason: str = "max_iter"
    zero_updates: int = 0


def _rounded_k(ratio: Fraction, s: int, m: int) -> int:
    return min(max(math.floor(ratio * s + Fraction(1, 2)), 1), m)


def storage_bits(m: int, n: int, k: int, s: int) -> int:
    return 16 * m * k + 16 * s * n + k * n


def solve_ks(m: int, n: int, target_cr, ks_ratio=2) -> tuple[int, int]:
    """Largest sparsity s (with k tied to it by ks_ratio) whose storage meets target_cr.

    k = clamp(round(ks_ratio * s), 1, m); storage grows with s, so the scan
    stops at the first s that overflows the budget.
    """
    if m < 1 or n < 1:
        raise FactorizerError("dimensions must be positive")
    cr = as_fraction(target_cr)
    ratio = as_fraction(ks_ratio)
    budget = (1 - cr) * 16 * m * n
    best = None
    for s in range(1, m + 1):
        k = _rounded_k(ratio, s, m)
        if s > k:
            break
        if storage_bits(m, n, k, s) > budget:
            break
        best = (k, s)
    if best is None:
        raise BudgetTooTight(f"budget too tight for {m}x{n} at CR {float(cr):g}")
    return best


def _fix_signs(U: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column positive; argmax picks the lowest index on ties
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def init_dictionary(
    W: np.ndarray, k: int, mode: str = "svd", seed: int = 0, sign_fix: bool = True
) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    if k > m:
        raise FactorizerError(f"k={k} exceeds m={m}; overcomplete dictionaries are not allowed")
    if k < 1:
        raise FactorizerError("k must be positive")
    if mode == "svd":
        U, _, _ = np.linalg.svd(W, full_matrices=k > min(m, n))
        D = U[:, :k]
        return _fix_signs(D) if sign_fix else D.copy()
    if mode == "random":
        if k > n:
            raise FactorizerError(f"random init needs k <= n columns (k={k}, n={n})")
        rng = np.random.default_rng(seed)
        for _ in range(8):
            cols = rng.permutation(n)[:k]
            Q, R = np.linalg.qr(W[:, cols])
            d = np.abs(np.diag(R))
            if d.size and d.min() > 1e-10 * max(d.max(), np.finfo(float).tiny):
                signs = np.sign(np.diag(R))
                return Q * signs
        raise FactorizerError("random init could not find k independent columns")
    raise FactorizerError(f"unknown init mode {mode!r}")


def hard_threshold(Z: np.ndarray, s: int) -> np.ndarray:
    """Boolean mask of the s largest-magnitude entries per column; ties keep lower rows."""
    k = Z.shape[0]
    if s >= k:
        return np.ones(Z.shape, dtype=bool)
    if s <= 0:
        return np.zeros(Z.shape, dtype=bool)
    a = np.abs(Z)
    thr = np.partition(a, k - s, axis=0)[k - s]
    above = a > thr
    need = s - above.sum(axis=0)
    tied = a == thr
    keep = above | (tied & (np.cumsum(tied, axis=0) <= need))
    return keep


def sparse_code(D: np.ndarray, W: np.ndarray, s: int) -> SparseCodes:
    D = np.asarray(D, dtype=np.float64)
    if s > D.shape[1]:
        raise FactorizerError(f"s={s} exceeds k={D.shape[1]}")
    if s < 1:
        raise FactorizerError("s must be positive")
    Z = D.T @ np.asarray(W, dtype=np.float64)
    keep = hard_threshold(Z, s) & (Z != 0)
    return SparseCodes(np.where(keep, Z, 0.0), keep, s)


def procrustes_update(
    W: np.ndarray, codes: SparseCodes | np.ndarray, previous: np.ndarray | None = None
) -> np.ndarray:
    """argmax trace(D^T M) over column-orthonormal D, with M = W S^T, via D = P Q^T."""
    S = codes.dense() if isinstance(codes, SparseCodes) else np.asarray(codes, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] != S.shape[1]:
        raise FactorizerError("codes and weight disagree on n")
    M = W @ S.T
    if not np.any(M):
        if previous is None:
            raise FactorizerError("Procrustes target is all zero and no previous dictionary")
        return previous
    P, _, Qt = np.linalg.svd(M, full_matrices=False)
    return P @ Qt


def reconstruction_loss(W: np.ndarray, D: np.ndarray, codes: SparseCodes) -> float:
    R = np.asarray(W, dtype=np.float64) - D @ codes.dense()
    return float(np.vdot(R, R))


def factorize(
    W: np.ndarray, cfg: FactorizerConfig, k: int, s: int
) -> tuple[np.ndarray, SparseCodes, FactorizationTrace]:
    """Run the alternating minimization on a whitened matrix.

    Returns the orthonormal dictionary, the codes it was fitted to, and a
    trace whose ``losses[t]`` is ||W - D_t S_t||_F^2 after iteration t.
    """
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[0]
    if not 1 <= s <= k <= m:
        raise FactorizerError(f"need 1 <= s <= k <= m, got s={s}, k={k}, m={m}")
    D = init_dictionary(W, k, cfg.init, cfg.seed, cfg.sign_fix)
    trace = FactorizationTrace()
    codes = None
    for t in range(cfg.max_iterations):
        codes = sparse_code(D, W, s)
        D_new = procrustes_update(W, codes, previous=D)
        if D_new is D:
            trace.zero_updates += 1
        D = D_new
        loss = reconstruction_loss(W, D, codes)
        trace.losses.append(loss)
        trace.iterations_run = t + 1
        if cfg.early_stop_tol is not None and t > 0:
            prev = trace.losses[-2]
            if prev == 0 or abs(prev - loss) / prev <= cfg.early_stop_tol:
                trace.stop_reason = "tolerance"
                break
    return D, codes, trace
