"""Single-head scaled dot-product attention and its exact key derivatives.

The loss is only seen through ``E = dL/do``. For a fixed ``E`` the key
gradient is colinear with the query, and every key-key Hessian block is a
scalar multiple of ``q q^T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _faults
from .errors import DimensionMismatch, EmptySequence, IndexOutOfRange
from .numerics import as_vector, softmax


@dataclass(frozen=True)
class AttentionSnapshot:
    """Forward state of one head for one query.

    ``keys`` is (n, d_k), ``values`` is (n, d_v).
    """

    query: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    logits: np.ndarray
    scores: np.ndarray
    output: np.ndarray
    scale: float

    @property
    def n(self) -> int:
        return self.keys.shape[0]

    @property
    def d_k(self) -> int:
        return self.keys.shape[1]

    @property
    def d_v(self) -> int:
        return self.values.shape[1]

    def residual(self, i: int) -> np.ndarray:
        return self.values[i] - self.output


@dataclass(frozen=True)
class HessianBlock:
    """Rank-one block ``coefficient * q q^T`` of d^2 L / dk_i dk_j."""

    coefficient: float
    direction: np.ndarray

    def materialize(self) -> np.ndarray:
        return self.coefficient * np.outer(self.direction, self.direction)


def _as_rows(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be a list of vectors, got shape {a.shape}")
    if a.shape[0] == 0:
        raise EmptySequence(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def attention_forward(q, keys, values) -> AttentionSnapshot:
    q = as_vector(q, "query")
    if len(keys) == 0 or len(values) == 0:
        raise EmptySequence("attention needs at least one key/value pair")
    K = _as_rows(keys, "keys")
    V = _as_rows(values, "values")
    if K.shape[0] != V.shape[0]:
        raise DimensionMismatch(f"{K.shape[0]} keys but {V.shape[0]} values")
    if K.shape[1] != q.size:
        raise DimensionMismatch(f"query has d_k={q.size}, keys have d_k={K.shape[1]}")
    scale = 1.0 / np.sqrt(q.size)
    logits = (K @ q) * scale
    scores = softmax(logits)
    output = scores @ V
    return AttentionSnapshot(q, K, V, logits, scores, output, scale)


def _check_index(s: AttentionSnapshot, i: int) -> None:
    if not 0 <= i < s.n:
        raise IndexOutOfRange(f"index {i} outside [0, {s.n})")


def key_gradient(s: AttentionSnapshot, E, i: int) -> np.ndarray:
    """dL/dk_i = (1/sqrt(d_k)) * alpha_i * <E, v_i - o> * q."""
    _check_index(s, i)
    E = as_vector(E, "E")
    if E.size != s.d_v:
        raise DimensionMismatch(f"E has {E.size} entries, values have d_v={s.d_v}")
    scale = 1.0 / s.d_k if _faults.active("gradient_scale") else s.scale
    return scale * s.scores[i] * (E @ s.residual(i)) * s.query


def key_gradients(s: AttentionSnapshot, E) -> np.ndarray:
    """All key gradients at once, shape (n, d_k)."""
    E = as_vector(E, "E")
    coeff = s.scale * s.scores * ((s.values - s.output) @ E)
    return coeff[:, None] * s.query[None, :]


def hessian_coefficient(s: AttentionSnapshot, E, i: int, j: int) -> float:
    _check_index(s, i)
    _check_index(s, j)
    E = as_vector(E, "E")
    if E.size != s.d_v:
        raise DimensionMismatch(f"E has {E.size} entries, values have d_v={s.d_v}")
    a = s.scores
    if i == j:
        factor = 1.0 - a[i] if _faults.active("hessian_diag") else 1.0 - 2.0 * a[i]
        ds = a[i] * factor * s.residual(i)
    else:
        ds = -a[i] * a[j] * (s.values[i] + s.values[j] - 2.0 * s.output)
    return float(E @ ds) / s.d_k


def hessian_block(s: AttentionSnapshot, E, i: int, j: int) -> HessianBlock:
    return HessianBlock(hessian_coefficient(s, E, i, j), s.query)


def full_hessian(s: AttentionSnapshot, E) -> np.ndarray:
    """Dense (n*d_k, n*d_k) Hessian of E.o with respect to all keys."""
    n, d = s.n, s.d_k
    H = np.zeros((n * d, n * d))
    for i in range(n):
        for j in range(n):
            H[i * d:(i + 1) * d, j * d:(j + 1) * d] = hessian_block(s, E, i, j).materialize()
    return H


def multihead_attention(q: np.ndarray, keys: np.ndarray, values: np.ndarray):
    """Batched forward for simulation loops.

    ``q`` is (H, d_k), ``keys`` (H, n, d_k), ``values`` (H, n, d_v).
    Returns ``(scores, output)`` with shapes (H, n) and (H, d_v).
    """
    logits = (keys @ q[:, :, None])[:, :, 0] / np.sqrt(q.shape[-1])
    scores = softmax(logits)
    output = (scores[:, None, :] @ values)[:, 0, :]
    return scores, output
