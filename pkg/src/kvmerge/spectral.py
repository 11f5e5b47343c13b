"""Spectral view of projection weights and adjacent-token similarity.

For a projection ``y = x W`` the cosine between adjacent projected tokens is
a cosine in the input space under the metric ``M = W W^T = U diag(lambda) U^T``.
Expanding in the eigenbasis splits that cosine into one additive term per
mode, which is what :func:`mode_contributions` returns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDirection, DimensionMismatch
from .numerics import EPS_DIRECTION, as_matrix, as_vector, cosine, svd


@dataclass(frozen=True)
class SpectralProfile:
    eigenvalues: np.ndarray  # lambda_i = sigma_i^2, descending
    left_vectors: np.ndarray  # columns u_i
    source_dims: tuple[int, int]

    def metric(self) -> np.ndarray:
        U = self.left_vectors
        return (U * self.eigenvalues) @ U.T


@dataclass(frozen=True)
class ModeContributions:
    contributions: np.ndarray
    total: float


def spectral_profile(W) -> SpectralProfile:
    W = as_matrix(W, "W")
    U, sigma, _ = svd(W)
    return SpectralProfile(sigma ** 2, U, W.shape)


def _metric_norm(p: np.ndarray, lam: np.ndarray, eps: float) -> float:
    nrm = np.sqrt(np.sum(lam * p * p))
    if nrm <= eps:
        raise DegenerateDirection("token maps to zero under the induced metric")
    return nrm


def mode_contributions(x_t, x_next, p: SpectralProfile, eps: float = EPS_DIRECTION) -> ModeContributions:
    x_t = as_vector(x_t, "x_t")
    x_next = as_vector(x_next, "x_next")
    U = p.left_vectors
    if x_t.size != U.shape[0] or x_next.size != U.shape[0]:
        raise DimensionMismatch(f"tokens must have {U.shape[0]} entries")
    lam = p.eigenvalues
    pt = x_t @ U
    pn = x_next @ U
    denom = _metric_norm(pt, lam, eps) * _metric_norm(pn, lam, eps)
    c = lam * pt * pn / denom
    return ModeContributions(c, float(np.sum(c)))


def adjacent_similarity(X, W, eps: float = EPS_DIRECTION) -> list[float]:
    """cos(x_t W, x_{t+1} W) for every adjacent pair of rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    W = as_matrix(W, "W")
    if X.ndim != 2 or X.shape[0] < 2:
        raise DimensionMismatch("need at least two tokens")
    if X.shape[1] != W.shape[0]:
        raise DimensionMismatch(f"tokens have {X.shape[1]} entries, W has {W.shape[0]} rows")
    Y = X @ W
    return [cosine(Y[t], Y[t + 1], eps) for t in range(len(Y) - 1)]


def mean_adjacent_similarity(X, W) -> float:
    """Vectorised mean of :func:`adjacent_similarity` (no degeneracy checks)."""
    Y = np.asarray(X, dtype=np.float64) @ np.asarray(W, dtype=np.float64)
    nrm = np.linalg.norm(Y, axis=1)
    cos = np.sum(Y[:-1] * Y[1:], axis=1) / (nrm[:-1] * nrm[1:])
    return float(np.mean(np.clip(cos, -1.0, 1.0)))


def concentration_stats(p: SpectralProfile, k: int = 8) -> tuple[float, float]:
    """Return ``(participation_ratio, topk_energy)`` of the eigenvalue spectrum."""
    lam = np.asarray(p.eigenvalues, dtype=np.float64)
    total = float(np.sum(lam))
    if total <= 0.0:
        raise DegenerateDirection("spectrum has no energy")
    pr = total ** 2 / float(np.sum(lam ** 2))
    return pr, float(np.sum(lam[:k])) / total
