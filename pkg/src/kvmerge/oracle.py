"""Independent verifiers for the analytic attention derivatives and merges.

Nothing here reuses the closed forms it checks: derivatives come from
central differences of ``L(K) = E . o(K)`` evaluated by a separate batched
forward pass (in difference form, so roundoff does not swamp the second
differences), and the merge system is solved densely with an SVD
pseudoinverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionSnapshot, attention_forward, full_hessian, hessian_block, key_gradient
from .errors import DegenerateDirection, DegenerateSystem
from .merge import (
    exact_weights,
    merge_key_exact,
    merge_weights_gradient_free,
    sensitivity_vectors,
)
from .numerics import as_vector, cosine, pinv, softmax


@dataclass(frozen=True)
class FdConfig:
    step: float = 1e-5
    scheme: str = "central"

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.scheme != "central":
            raise ValueError("only central differences are supported")


GRADIENT_FD = FdConfig(1e-5)
HESSIAN_FD = FdConfig(1e-4)


@dataclass(frozen=True)
class AlignmentReport:
    cos_e_c11: float
    cos_e_c22: float
    cos_e_c12: float

    @property
    def max_deviation(self) -> float:
        return max(abs(self.cos_e_c11 - self.cos_e_c22), abs(self.cos_e_c11 + self.cos_e_c12))


def _loss_delta_batch(q, K, Ks, V, E) -> np.ndarray:
    """``L(K') - L(K)`` for a stack of perturbed key matrices ``Ks`` (B, n, d).

    Works with the softmax ratio ``alpha'_i / alpha_i = exp(de_i) / Z`` so the
    difference is formed from ``expm1`` of the logit change rather than by
    subtracting two O(1) losses.
    """
    alpha = softmax(K @ q / np.sqrt(q.size))
    r = (V - alpha @ V) @ E
    x = np.expm1((Ks - K) @ q / np.sqrt(q.size))
    zm1 = x @ alpha
    dalpha = alpha * (x - zm1[:, None]) / (1.0 + zm1)[:, None]
    return dalpha @ r


def _inputs(q, K, V, E):
    s = attention_forward(q, K, V)
    E = as_vector(E, "E")
    return s.query, s.keys, s.values, E


def fd_key_gradient(q, K, V, E, i: int, cfg: FdConfig = GRADIENT_FD) -> np.ndarray:
    q, K, V, E = _inputs(q, K, V, E)
    d = K.shape[1]
    h = cfg.step
    Ks = np.repeat(K[None], 2 * d, axis=0)
    for a in range(d):
        Ks[2 * a, i, a] += h
        Ks[2 * a + 1, i, a] -= h
    L = _loss_delta_batch(q, K, Ks, V, E)
    return (L[0::2] - L[1::2]) / (2.0 * h)


def fd_hessian_block(q, K, V, E, i: int, j: int, cfg: FdConfig = HESSIAN_FD) -> np.ndarray:
    """Central differences (in k_j) of the central-difference gradient in k_i."""
    q, K, V, E = _inputs(q, K, V, E)
    d = K.shape[1]
    h = cfg.step
    # axis 0: outer coordinate b of k_j and sign; axis 1: inner coordinate a of k_i and sign
    Ks = np.repeat(K[None, None], 2 * d, axis=0).repeat(2 * d, axis=1)
    for b in range(d):
        Ks[2 * b, :, j, b] += h
        Ks[2 * b + 1, :, j, b] -= h
    for a in range(d):
        Ks[:, 2 * a, i, a] += h
        Ks[:, 2 * a + 1, i, a] -= h
    L = _loss_delta_batch(q, K, Ks.reshape(-1, *K.shape), V, E).reshape(2 * d, 2 * d)
    grad = (L[:, 0::2] - L[:, 1::2]) / (2.0 * h)  # (2d outer, d inner)
    return ((grad[0::2] - grad[1::2]) / (2.0 * h)).T


def fd_full_hessian(q, K, V, E, cfg: FdConfig = HESSIAN_FD) -> np.ndarray:
    n, d = np.shape(K)
    H = np.zeros((n * d, n * d))
    for i in range(n):
        for j in range(n):
            H[i * d:(i + 1) * d, j * d:(j + 1) * d] = fd_hessian_block(q, K, V, E, i, j, cfg)
    return H


def _pair_system(s: AttentionSnapshot, E, m: int):
    h11 = hessian_block(s, E, m, m).materialize()
    h12 = hessian_block(s, E, m, m + 1).materialize()
    h22 = hessian_block(s, E, m + 1, m + 1).materialize()
    km, kn = s.keys[m], s.keys[m + 1]
    M = h11 + 2.0 * h12 + h22
    N = h11 @ km + h12 @ (km + kn) + h22 @ kn
    return M, N


def dense_merge_oracle(s: AttentionSnapshot, E, m: int, rcond: float = 1e-10) -> np.ndarray:
    """``M^+ N`` for the pair's dense Newton system, via SVD pseudoinverse."""
    M, N = _pair_system(s, E, m)
    if not np.any(M):
        raise DegenerateSystem("pair Hessian is identically zero")
    Minv, rank = pinv(M, rcond)
    if rank == 0:
        raise DegenerateSystem("all singular values of M fall below the cutoff")
    return Minv @ N


def dense_system_rank(s: AttentionSnapshot, E, m: int, rcond: float = 1e-10) -> int:
    M, _ = _pair_system(s, E, m)
    if not np.any(M):
        return 0
    return pinv(M, rcond)[1]


def alignment_report(s: AttentionSnapshot, E, m: int) -> AlignmentReport:
    """Cosines between ``E`` and the three sensitivity vectors of pair m.

    Each ``c_ij`` is a signed scalar times a residual direction
    (``r_m``, ``r_{m+1}`` or ``r_m + r_{m+1}``), so the cosine is taken
    against that direction and the sign carried separately. This keeps the
    homogeneous case ``r_m == r_{m+1}`` exact in floating point.
    """
    E = as_vector(E, "E")
    a, b = s.scores[m], s.scores[m + 1]
    am = a * (1.0 - 2.0 * a)
    an = b * (1.0 - 2.0 * b)
    if am == 0.0 or an == 0.0 or a * b == 0.0:
        raise DegenerateDirection("a sensitivity vector vanishes")
    rm, rn = s.residual(m), s.residual(m + 1)
    return AlignmentReport(
        float(np.sign(am)) * cosine(E, rm),
        float(np.sign(an)) * cosine(E, rn),
        -cosine(E, rm + rn),
    )


def quadratic_objective_value(s: AttentionSnapshot, E, m: int, k_candidate, include_linear: bool = False) -> float:
    """Second-order model of replacing ``(k_m, k_{m+1})`` by ``(k, k)``.

    The quadratic part ``1/2 sum_ab D_a^T h^{ab} D_b`` (``D_a = k - k_a``) is
    what the Newton merge minimises. ``include_linear`` adds the first-order
    terms ``g_m . D_m + g_{m+1} . D_{m+1}``.
    """
    k = as_vector(k_candidate, "k_candidate")
    deltas = (k - s.keys[m], k - s.keys[m + 1])
    idx = (m, m + 1)
    value = 0.0
    for a in range(2):
        for b in range(2):
            h = hessian_block(s, E, idx[a], idx[b]).materialize()
            value += 0.5 * deltas[a] @ h @ deltas[b]
    if include_linear:
        value += key_gradient(s, E, m) @ deltas[0] + key_gradient(s, E, m + 1) @ deltas[1]
    return float(value)


def quadratic_model_gradient(s: AttentionSnapshot, E, m: int, k_candidate, include_linear: bool = False) -> np.ndarray:
    k = as_vector(k_candidate, "k_candidate")
    M, N = _pair_system(s, E, m)
    grad = M @ k - N
    if include_linear:
        grad = grad + key_gradient(s, E, m) + key_gradient(s, E, m + 1)
    return grad


# ---------------------------------------------------------------------------
# Instance builders


def random_instance(rng: np.random.Generator, n: int, d: int, d_v: int | None = None):
    """Gaussian ``(q, K, V, E)``; keys scaled so softmax is not saturated."""
    d_v = d if d_v is None else d_v
    q = rng.standard_normal(d)
    K = rng.standard_normal((n, d))
    V = rng.standard_normal((n, d_v))
    E = rng.standard_normal(d_v)
    return q, K, V, E


def residual_instance(rng, n: int, d: int, r_m, r_next, m: int = 1, max_mass: float = 0.45):
    """Snapshot whose pair ``(m, m+1)`` has residuals ``r_m`` and ``r_next``.

    The remaining values are random; the two pair values are solved so that
    ``v - o`` equals the requested residual. Keys are resampled until both
    pair scores are below ``max_mass`` (so ``alpha(1 - 2 alpha) > 0``).
    """
    if n < 3:
        raise ValueError("need at least one token outside the pair")
    r_m = np.asarray(r_m, dtype=np.float64)
    r_next = np.asarray(r_next, dtype=np.float64)
    for _ in range(1000):
        q = rng.standard_normal(d)
        K = 0.5 * rng.standard_normal((n, d))
        alpha = softmax(K @ q / np.sqrt(d))
        if alpha[m] < max_mass and alpha[m + 1] < max_mass:
            break
    else:
        raise RuntimeError("could not sample unsaturated scores")
    V = rng.standard_normal((n, r_m.size))
    others = np.ones(n, dtype=bool)
    others[[m, m + 1]] = False
    rest = 1.0 - alpha[m] - alpha[m + 1]
    o = (alpha[others] @ V[others] + alpha[m] * r_m + alpha[m + 1] * r_next) / rest
    V[m] = o + r_m
    V[m + 1] = o + r_next
    return attention_forward(q, K, V)


def angled_residuals(rng, d: int, theta: float, equal_norms: bool = False):
    """Two residual vectors at angle ``theta`` (radians) and an orthonormal pair spanning them."""
    basis, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    u, w = basis[:, 0], basis[:, 1]
    if equal_norms:
        a = b = rng.uniform(0.5, 2.0)
    else:
        a, b = rng.uniform(0.5, 2.0, size=2)
    return a * u, b * (np.cos(theta) * u + np.sin(theta) * w), u, w


def aligned_instance(rng, n: int, d: int):
    """Instance on which the three cosine equalities hold exactly.

    Pair residuals are positive multiples of one direction ``r`` and the pair
    scores stay below 1/2, so every ``c_ij`` is parallel to ``r`` with the
    signs (+, +, -). Any ``E`` with ``E . r != 0`` then satisfies them; a random
    component orthogonal to ``r`` is added so ``E`` is not trivially parallel.
    """
    r = rng.standard_normal(d)
    r /= np.linalg.norm(r)
    a, b = rng.uniform(0.3, 3.0, size=2)
    s = residual_instance(rng, n, d, a * r, b * r, m=1)
    perp = rng.standard_normal(d)
    perp -= (perp @ r) * r
    E = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0) * r + perp
    return s, E


def rank_data(x) -> np.ndarray:
    """Average ranks (1-based), ties shared."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(1, len(x) + 1)
    for v in np.unique(x):
        tie = x == v
        if np.count_nonzero(tie) > 1:
            ranks[tie] = ranks[tie].mean()
    return ranks


def spearman(x, y) -> float:
    rx, ry = rank_data(x), rank_data(y)
    return float(np.corrcoef(rx, ry)[0, 1])


def alignment_sweep(thetas_deg, seeds: int, n: int = 8, d: int = 8, base_seed: int = 0):
    """Median max_deviation per residual angle, E drawn in the residual plane.

    Returns ``(medians, spearman(theta, median))``.
    """
    medians = []
    for theta in thetas_deg:
        devs = []
        for seed in range(seeds):
            rng = np.random.default_rng([base_seed, seed])
            r_m, r_n, u, w = angled_residuals(rng, d, np.deg2rad(theta))
            s = residual_instance(rng, n, d, r_m, r_n)
            z = rng.standard_normal(2)
            devs.append(alignment_report(s, z[0] * u + z[1] * w, 1).max_deviation)
        medians.append(float(np.median(devs)))
    return medians, spearman(thetas_deg, medians)


# ---------------------------------------------------------------------------
# Verification suite (drives ``kvmerge verify``)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    cases: int
    notes: list[str] = field(default_factory=list)


def _rel(a, b, floor: float = 1e-300) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def check_gradients(seeds, sizes, dims, tol: float = 1e-6) -> CheckResult:
    worst, cases = 0.0, 0
    for n in sizes:
        for d in dims:
            for seed in seeds:
                q, K, V, E = random_instance(np.random.default_rng([1, n, d, seed]), n, d)
                s = attention_forward(q, K, V)
                analytic = np.concatenate([key_gradient(s, E, i) for i in range(n)])
                fd = np.concatenate([fd_key_gradient(q, K, V, E, i) for i in range(n)])
                worst = max(worst, _rel(analytic, fd))
                cases += 1
    return CheckResult("key gradient vs finite differences", bool(worst < tol), worst, tol, cases)


def check_hessians(seeds, sizes, dims, tol: float = 1e-4) -> CheckResult:
    worst, cases = 0.0, 0
    symmetric = True
    for n in sizes:
        for d in dims:
            for seed in seeds:
                q, K, V, E = random_instance(np.random.default_rng([2, n, d, seed]), n, d)
                s = attention_forward(q, K, V)
                H = full_hessian(s, E)
                worst = max(worst, _rel(H, fd_full_hessian(q, K, V, E)))
                for i in range(n - 1):
                    a = hessian_block(s, E, i, i + 1).materialize()
                    b = hessian_block(s, E, i + 1, i).materialize()
                    symmetric &= bool(np.array_equal(a, b))
                cases += 1
    res = CheckResult("Hessian blocks vs finite differences", bool(worst < tol and symmetric), worst, tol, cases)
    if not symmetric:
        res.notes.append("off-diagonal blocks not symmetric")
    return res


def check_rank_one(seeds, sizes, dims, tol: float = 1e-12) -> CheckResult:
    from .numerics import svd

    worst, cases = 0.0, 0
    for n in sizes:
        for d in dims:
            if d < 2:
                continue
            for seed in seeds:
                q, K, V, E = random_instance(np.random.default_rng([3, n, d, seed]), n, d)
                s = attention_forward(q, K, V)
                for i in range(n):
                    for j in range(n):
                        sig = svd(hessian_block(s, E, i, j).materialize())[1]
                        if sig[0] > 0:
                            worst = max(worst, sig[1] / sig[0])
                        cases += 1
    return CheckResult("Hessian blocks are rank one", bool(worst < tol), worst, tol, cases)


def check_solver_equivalence(instances: int, tol: float = 1e-9, stationarity_tol: float = 1e-8) -> CheckResult:
    worst, worst_stat, cases = 0.0, 0.0, 0
    seed = 0
    while cases < instances:
        rng = np.random.default_rng([4, seed])
        seed += 1
        n = int(rng.integers(4, 17))
        d = int(rng.integers(4, 17))
        q, K, V, E = random_instance(rng, n, d)
        s = attention_forward(q, K, V)
        m = int(rng.integers(0, n - 1))
        try:
            k_exact = merge_key_exact(s, E, m, eps=1e-8)
            k_dense = dense_merge_oracle(s, E, m)
        except DegenerateSystem:
            continue
        worst = max(worst, _rel(k_exact, k_dense))
        g = quadratic_model_gradient(s, E, m, k_exact)
        qhat = s.query / np.linalg.norm(s.query)
        worst_stat = max(worst_stat, abs(qhat @ g))
        cases += 1
    res = CheckResult(
        "closed-form merge vs dense pseudoinverse", bool(worst < tol and worst_stat < stationarity_tol), worst, tol, cases
    )
    res.notes.append(f"max |stationarity along q| = {worst_stat:.2e}")
    return res


def check_cancellation(instances: int, tol: float = 1e-9) -> CheckResult:
    worst, cases, seed = 0.0, 0, 0
    while cases < instances:
        rng = np.random.default_rng([5, seed])
        seed += 1
        s, E = aligned_instance(rng, int(rng.integers(4, 12)), int(rng.integers(2, 12)))
        wf = merge_weights_gradient_free(sensitivity_vectors(s, 1))
        if wf.fallback_used:
            continue
        we = exact_weights(s, E, 1)
        worst = max(worst, abs(wf.w_m - we.w_m), abs(wf.w_next - we.w_next))
        cases += 1
    return CheckResult("gradient-free weights under exact alignment", bool(worst < tol), worst, tol, cases)


def check_spectral_identity(instances: int, tol: float = 1e-10) -> CheckResult:
    from .spectral import mode_contributions, spectral_profile

    worst = 0.0
    for seed in range(instances):
        rng = np.random.default_rng([6, seed])
        dm, dh = int(rng.integers(2, 17)), int(rng.integers(1, 9))
        W = rng.standard_normal((dm, dh)) * rng.uniform(0.1, 3.0, size=dh)
        x, y = rng.standard_normal((2, dm))
        total = mode_contributions(x, y, spectral_profile(W)).total
        worst = max(worst, abs(total - cosine(x @ W, y @ W)))
    return CheckResult("mode contributions sum to projected cosine", bool(worst < tol), worst, tol, instances)


def check_alignment(seeds: int, spearman_min: float = 0.9, exact_tol: float = 0.0) -> CheckResult:
    thetas = [30.0, 20.0, 10.0, 5.0, 2.0, 1.0]
    medians, rho = alignment_sweep(thetas, seeds)
    exact_worst = 0.0
    for seed in range(max(seeds, 1)):
        rng = np.random.default_rng([7, seed])
        r = rng.standard_normal(6)
        s = residual_instance(rng, 8, 6, r, r)
        exact_worst = max(exact_worst, alignment_report(s, rng.standard_normal(6), 1).max_deviation)
    passed = bool(exact_worst <= exact_tol and rho > spearman_min)
    res = CheckResult("alignment relation (homogeneous residuals)", passed, exact_worst, exact_tol, seeds * len(thetas))
    res.notes.append(f"spearman(theta, median deviation) = {rho:.3f}")
    return res


def run_suite(seeds: int = 3, sizes=(2, 4, 8), dims=(2, 4), instances: int = 50) -> list[CheckResult]:
    seed_list = list(range(seeds))
    # The sweep needs several angles' worth of samples to rank them.
    return [
        check_gradients(seed_list, sizes, dims),
        check_hessians(seed_list, sizes, dims),
        check_rank_one(seed_list, sizes, dims),
        check_solver_equivalence(instances),
        check_cancellation(instances),
        check_spectral_identity(instances),
        check_alignment(max(seeds, 20)),
    ]
