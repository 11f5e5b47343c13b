"""Small dense linear-algebra kernel (double precision).

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
The SVD is a one-sided Jacobi (Hestenes) factorization written here so the
rest of the package does not depend on LAPACK ordering or sign conventions.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceFailure, DegenerateDirection, DimensionMismatch

EPS_DIRECTION = 1e-12
_EPS = np.finfo(np.float64).eps


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionMismatch(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    w = np.exp(z)
    return w / np.sum(w, axis=-1, keepdims=True)


def _jacobi_columns(a: np.ndarray, tol: float, max_sweeps: int):
    # Rotates column pairs of ``a`` until they are mutually orthogonal.
    # Returns (a_rotated, v) with a_original @ v == a_rotated.
    r, c = a.shape
    work = np.vstack([a, np.eye(c)])
    for _ in range(max_sweeps):
        rotated = False
        for i in range(c - 1):
            for j in range(i + 1, c):
                ai = work[:r, i]
                aj = work[:r, j]
                alpha = ai @ ai
                beta = aj @ aj
                gamma = ai @ aj
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                col_i = work[:, i].copy()
                work[:, i] = cs * col_i - sn * work[:, j]
                work[:, j] = sn * col_i + cs * work[:, j]
        if not rotated:
            return work[:r], work[r:]
    raise ConvergenceFailure(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


def _complete_orthonormal(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    # Replace columns of u not marked in ``filled`` by orthonormal completions.
    r = u.shape[0]
    basis = [u[:, k] for k in range(u.shape[1]) if filled[k]]
    candidates = iter(np.eye(r))
    for k in range(u.shape[1]):
        if filled[k]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            nrm = np.linalg.norm(w)
            if nrm > 1e-8:
                u[:, k] = w / nrm
                basis.append(u[:, k])
                break
    return u


def svd(m, tol: float = 1e-15, max_sweeps: int = 60):
    """Thin SVD ``m = U @ diag(sigma) @ Vt``.

    Returns ``U`` (r x k), ``sigma`` (k,), ``Vt`` (k x c) with
    ``k = min(r, c)``; singular values are non-negative and descending.
    Raises ConvergenceFailure when ``max_sweeps`` Jacobi sweeps are not enough.
    """
    a = as_matrix(m)
    if a.shape[0] < a.shape[1]:
        u, s, vt = svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return vt.T, s, u.T

    r, c = a.shape
    rotated, v = _jacobi_columns(a.copy(), tol, max_sweeps)
    sigma = np.linalg.norm(rotated, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    rotated = rotated[:, order]
    v = v[:, order]

    cutoff = max(r, c) * _EPS * (sigma[0] if sigma[0] > 0 else 1.0)
    filled = sigma > cutoff
    u = np.zeros((r, c))
    u[:, filled] = rotated[:, filled] / sigma[filled]
    if not np.all(filled):
        u = _complete_orthonormal(u, filled)
    return u, sigma, v.T


def pinv(m, rcond: float = 1e-10):
    """Moore-Penrose pseudoinverse via ``svd``.

    Singular values below ``rcond * sigma_max`` are discarded. Returns the
    pseudoinverse and the number of retained singular values.
    """
    u, s, vt = svd(m)
    keep = s > rcond * s[0] if s[0] > 0 else np.zeros_like(s, dtype=bool)
    inv = (vt[keep].T / s[keep]) @ u[:, keep].T
    return inv, int(np.count_nonzero(keep))


def project_onto(q, b, eps: float = EPS_DIRECTION) -> np.ndarray:
    """Orthogonal projection of ``b`` onto span{q}."""
    q = as_vector(q, "q")
    b = as_vector(b, "b")
    if q.shape != b.shape:
        raise DimensionMismatch(f"q has {q.size} entries, b has {b.size}")
    if np.linalg.norm(q) <= eps:
        raise DegenerateDirection("cannot project onto a zero-norm direction")
    return (q @ b) / (q @ q) * q


def cosine(a, b, eps: float = EPS_DIRECTION) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionMismatch(f"a has {a.size} entries, b has {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= eps or nb <= eps:
        raise DegenerateDirection("cosine of a zero-norm vector is undefined")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
