"""Key/value merging rules for an adjacent pair (m, m+1).

Exact route: the three Hessian blocks of the pair are ``g_ij/d_k * q q^T``
with ``g_ij = E . c_ij``. The merged key solving the rank-one Newton system is
``P_q b / gamma``, or equivalently the affine combination with weights
``(g11 + g12)/gamma`` and ``(g12 + g22)/gamma``.

Gradient-free route: when ``cos(E, c11) = cos(E, c22) = -cos(E, c12)`` the
unknown ``E`` cancels and the weights depend only on ``||c_ij||``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _faults
from .attention import AttentionSnapshot
from .errors import DegenerateSystem, DimensionMismatch, IndexOutOfRange
from .numerics import as_vector, project_onto

WEIGHT_EPS = 1e-10
GAMMA_EPS = 1e-12
ASYMKV_EPS = 1e-12
# Gradient-free weights outside this band fall back to the mean merge.
WEIGHT_BAND = (-1.0, 2.0)


@dataclass(frozen=True)
class SensitivityTriple:
    c11: np.ndarray
    c22: np.ndarray
    c12: np.ndarray
    n11: float
    n22: float
    n12: float


@dataclass(frozen=True)
class MergeWeights:
    w_m: float
    w_next: float
    fallback_used: bool = False


def _check_pair(s: AttentionSnapshot, m: int) -> None:
    if not 0 <= m or m + 1 >= s.n:
        raise IndexOutOfRange(f"pair ({m}, {m + 1}) outside sequence of length {s.n}")


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")


def sensitivity_vectors(s: AttentionSnapshot, m: int) -> SensitivityTriple:
    _check_pair(s, m)
    a, b = s.scores[m], s.scores[m + 1]
    vm, vn, o = s.values[m], s.values[m + 1], s.output
    c11 = a * (1.0 - 2.0 * a) * (vm - o)
    c22 = b * (1.0 - 2.0 * b) * (vn - o)
    c12 = -a * b * (vm + vn - 2.0 * o)
    if _faults.active("c12_sign"):
        c12 = -c12
    return SensitivityTriple(
        c11, c22, c12,
        float(np.linalg.norm(c11)), float(np.linalg.norm(c22)), float(np.linalg.norm(c12)),
    )


def pair_sensitivity_norms(scores: np.ndarray, values: np.ndarray, output: np.ndarray, idx):
    """Vectorised ``(n11, n22, n12)`` for pairs ``(idx, idx + 1)``.

    Leading axes of ``scores``/``values``/``output`` are treated as batch
    (e.g. heads): ``scores`` (..., n), ``values`` (..., n, d_v), ``output``
    (..., d_v). Returns three arrays of shape (..., len(idx)).
    """
    idx = np.asarray(idx, dtype=np.intp)
    a = scores[..., idx]
    b = scores[..., idx + 1]
    rm = values[..., idx, :] - output[..., None, :]
    rn = values[..., idx + 1, :] - output[..., None, :]
    n11 = np.abs(a * (1.0 - 2.0 * a)) * np.linalg.norm(rm, axis=-1)
    n22 = np.abs(b * (1.0 - 2.0 * b)) * np.linalg.norm(rn, axis=-1)
    n12 = np.abs(a * b) * np.linalg.norm(rm + rn, axis=-1)
    return n11, n22, n12


def gradient_free_weights(n11, n12, n22, eps: float = WEIGHT_EPS):
    """Array form of :func:`merge_weights_gradient_free`.

    Returns ``(w_m, w_next, fallback)`` arrays broadcast from the inputs.
    """
    n11, n12, n22 = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (n11, n12, n22)))
    num_m = n11 - n12
    num_n = n22 - n12
    denom = num_m + num_n
    fallback = np.abs(denom) <= eps
    safe = np.where(fallback, 1.0, denom)
    w_m = num_m / safe
    w_n = num_n / safe
    lo, hi = WEIGHT_BAND
    fallback |= (w_m < lo) | (w_m > hi) | (w_n < lo) | (w_n > hi)
    w_m = np.where(fallback, 0.5, w_m)
    w_n = np.where(fallback, 0.5, w_n)
    return w_m, w_n, fallback


def merge_weights_gradient_free(t: SensitivityTriple, eps: float = WEIGHT_EPS) -> MergeWeights:
    """Forward-only merge weights from the sensitivity norms.

    ``w_m = (n11 - n12) / D`` and ``w_next = (n22 - n12) / D`` with
    ``D = n11 - 2 n12 + n22``. Falls back to (0.5, 0.5) when ``|D| <= eps``
    or a weight leaves [-1, 2].
    """
    w_m, w_n, fb = gradient_free_weights(t.n11, t.n12, t.n22, eps)
    return MergeWeights(float(w_m), float(w_n), bool(fb))


def merge_key_closed_form(k_m, k_next, w: MergeWeights) -> np.ndarray:
    k_m = as_vector(k_m, "k_m")
    k_next = as_vector(k_next, "k_next")
    _same_shape(k_m, k_next, "keys")
    return w.w_m * k_m + w.w_next * k_next


def scalar_sensitivities(s: AttentionSnapshot, E, m: int) -> tuple[float, float, float]:
    """``(g11, g12, g22)`` with ``g_ij = E . c_ij``."""
    E = as_vector(E, "E")
    if E.size != s.d_v:
        raise DimensionMismatch(f"E has {E.size} entries, values have d_v={s.d_v}")
    t = sensitivity_vectors(s, m)
    return float(E @ t.c11), float(E @ t.c12), float(E @ t.c22)


def exact_weights(s: AttentionSnapshot, E, m: int, eps: float = GAMMA_EPS) -> MergeWeights:
    g11, g12, g22 = scalar_sensitivities(s, E, m)
    num_m = g11 + g12
    num_n = g12 + g22
    gamma = num_m + num_n
    if abs(gamma) <= eps:
        raise DegenerateSystem(f"|gamma| = {abs(gamma):.3e} <= {eps:.1e}")
    return MergeWeights(num_m / gamma, num_n / gamma)


def merge_key_exact(s: AttentionSnapshot, E, m: int, eps: float = GAMMA_EPS) -> np.ndarray:
    """Minimum-norm solution ``P_q b / gamma`` of the rank-one Newton system."""
    g11, g12, g22 = scalar_sensitivities(s, E, m)
    gamma = g11 + 2.0 * g12 + g22
    if abs(gamma) <= eps:
        raise DegenerateSystem(f"|gamma| = {abs(gamma):.3e} <= {eps:.1e}")
    b = (g11 + g12) * s.keys[m] + (g12 + g22) * s.keys[m + 1]
    return project_onto(s.query, b) / gamma


def merge_key_weight_form_exact(s: AttentionSnapshot, E, m: int, eps: float = GAMMA_EPS) -> np.ndarray:
    w = exact_weights(s, E, m, eps)
    return w.w_m * s.keys[m] + w.w_next * s.keys[m + 1]


def merge_key_asymkv(k_m, k_next, grad_m, grad_next, eps: float = ASYMKV_EPS) -> np.ndarray:
    """Diagonal-Fisher merge: per-coordinate weights proportional to squared gradients."""
    k_m, k_next = np.asarray(k_m, dtype=np.float64), np.asarray(k_next, dtype=np.float64)
    grad_m, grad_next = np.asarray(grad_m, dtype=np.float64), np.asarray(grad_next, dtype=np.float64)
    if not (k_m.shape == k_next.shape == grad_m.shape == grad_next.shape):
        raise DimensionMismatch("keys and gradients must share a shape")
    fm = grad_m * grad_m
    fn = grad_next * grad_next
    return (fm * k_m + fn * k_next) / (fm + fn + eps)


def merge_value(v_m, v_next) -> np.ndarray:
    v_m, v_next = np.asarray(v_m, dtype=np.float64), np.asarray(v_next, dtype=np.float64)
    _same_shape(v_m, v_next, "values")
    return v_m + v_next


def merge_key_mean(k_m, k_next) -> np.ndarray:
    k_m, k_next = np.asarray(k_m, dtype=np.float64), np.asarray(k_next, dtype=np.float64)
    _same_shape(k_m, k_next, "keys")
    return 0.5 * (k_m + k_next)
