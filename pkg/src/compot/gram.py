"""Calibration Gram accumulation, Cholesky whitening and dewhitening."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class GramError(ValueError):
    pass


class GramNotFactorizable(ArithmeticError):
    pass


@dataclass(frozen=True)
class GramState:
    G: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, dim: int) -> "GramState":
        return cls(np.zeros((dim, dim), dtype=np.float64), 0)

    @property
    def dim(self) -> int:
        return self.G.shape[0]


def accumulate(state: GramState, chunk: np.ndarray) -> GramState:
    """Add ``chunk.T @ chunk`` (f64) for an ``N_c x m`` activation block."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim != 2 or chunk.shape[1] != state.dim:
        raise GramError(f"chunk width {chunk.shape[-1]} does not match gram dim {state.dim}")
    if not np.isfinite(chunk).all():
        raise GramError("non-finite activations")
    G = state.G + chunk.T @ chunk
    # exact symmetry regardless of BLAS blocking
    G = 0.5 * (G + G.T)
    return GramState(G, state.count + chunk.shape[0])


@dataclass(frozen=True)
class RidgePolicy:
    """Diagonal loading schedule, relative to mean(diag G)."""

    start: float = 1e-8
    factor: float = 10.0
    stop: float = 1e-2
    # smallest admissible squared pivot relative to max(diag G); below it G is
    # treated as numerically singular even if LAPACK reports success
    pivot_tol: float = 1e-12


@dataclass(frozen=True)
class CholeskyFactor:
    L: np.ndarray
    ridge_used: float = 0.0

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "CholeskyFactor":
        return cls(np.eye(dim))


def _try_cholesky(G: np.ndarray, pivot_tol: float) -> np.ndarray | None:
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return None
    scale = float(np.max(np.diag(G)))
    if not np.isfinite(L).all() or np.min(np.diag(L)) ** 2 <= pivot_tol * scale:
        return None
    return L


def cholesky(state: GramState | np.ndarray, policy: RidgePolicy = RidgePolicy()) -> CholeskyFactor:
    if isinstance(state, GramState):
        if state.count <= 0:
            raise GramError("gram has no samples")
        G = state.G
    else:
        G = np.asarray(state, dtype=np.float64)
    L = _try_cholesky(G, policy.pivot_tol)
    if L is not None:
        return CholeskyFactor(L, 0.0)

    mean_diag = float(np.mean(np.diag(G)))
    if not mean_diag > 0:
        raise GramNotFactorizable("gram not factorizable")
    eye = np.eye(G.shape[0])
    rel = policy.start
    while rel <= policy.stop * (1 + 1e-12):
        eps = rel * mean_diag
        L = _try_cholesky(G + eps * eye, policy.pivot_tol)
        if L is not None:
            return CholeskyFactor(L, eps)
        rel *= policy.factor
    raise GramNotFactorizable("gram not factorizable")


def whiten(chol: CholeskyFactor, W: np.ndarray) -> np.ndarray:
    """Return ``L.T @ W`` in float64."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != chol.dim:
        raise GramError(f"weight rows {W.shape[0]} do not match factor dim {chol.dim}")
    return chol.L.T @ W


def dewhiten_dictionary(chol: CholeskyFactor, D: np.ndarray) -> np.ndarray:
    """Return ``L^{-T} @ D`` by a triangular solve."""
    D = np.asarray(D, dtype=np.float64)
    if D.shape[0] != chol.dim:
        raise GramError(f"dictionary rows {D.shape[0]} do not match factor dim {chol.dim}")
    return solve_triangular(chol.L, D, trans="T", lower=True, check_finite=False)


def functional_loss(chol: CholeskyFactor, W: np.ndarray, W_hat: np.ndarray) -> float:
    """||X (W - W_hat)||_F^2 evaluated as ||L^T (W - W_hat)||_F^2."""
    diff = np.asarray(W, dtype=np.float64) - np.asarray(W_hat, dtype=np.float64)
    return float(np.sum(whiten(chol, diff) ** 2))
