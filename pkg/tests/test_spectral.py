import numpy as np
import pytest

from kvmerge.errors import DegenerateDirection, DimensionMismatch
from kvmerge.numerics import cosine
from kvmerge.spectral import (
    SpectralProfile,
    adjacent_similarity,
    concentration_stats,
    mean_adjacent_similarity,
    mode_contributions,
    spectral_profile,
)


def test_identity_profile():
    p = spectral_profile(np.eye(4))
    np.testing.assert_allclose(p.eigenvalues, [1, 1, 1, 1])
    assert p.source_dims == (4, 4)


def test_diag_profile():
    np.testing.assert_allclose(spectral_profile(np.diag([3.0, 0.0])).eigenvalues, [9.0, 0.0])


def test_metric_reconstruction():
    W = np.random.default_rng(0).standard_normal((16, 8))
    p = spectral_profile(W)
    M = W @ W.T
    assert np.linalg.norm(p.metric() - M) / np.linalg.norm(M) < 1e-8
    np.testing.assert_allclose(p.left_vectors.T @ p.left_vectors, np.eye(8), atol=1e-10)
    assert np.all(np.diff(p.eigenvalues) <= 0)


def test_self_similarity():
    rng = np.random.default_rng(1)
    W, x = rng.standard_normal((6, 4)), rng.standard_normal(6)
    mc = mode_contributions(x, x, spectral_profile(W))
    assert mc.total == pytest.approx(1.0, abs=1e-12)
    assert np.all(mc.contributions >= 0)


def test_orthogonal_weight_gives_raw_cosine():
    rng = np.random.default_rng(2)
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    x, y = rng.standard_normal((2, 5))
    assert mode_contributions(x, y, spectral_profile(2.0 * Q)).total == pytest.approx(cosine(x, y), abs=1e-12)


def test_rank_one_weight():
    rng = np.random.default_rng(3)
    W = np.outer(rng.standard_normal(6), rng.standard_normal(3))
    x, y = rng.standard_normal((2, 6))
    mc = mode_contributions(x, y, spectral_profile(W))
    assert abs(mc.total) == pytest.approx(1.0, abs=1e-12)
    assert abs(mc.contributions[0]) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(mc.contributions[1:], 0.0, atol=1e-15)


def test_contributions_sum_to_projected_cosine():
    rng = np.random.default_rng(4)
    for _ in range(200):
        W = rng.standard_normal((12, 5))
        x, y = rng.standard_normal((2, 12))
        mc = mode_contributions(x, y, spectral_profile(W))
        assert mc.total == pytest.approx(cosine(x @ W, y @ W), abs=1e-10)
        assert mc.total == pytest.approx(mc.contributions.sum(), abs=1e-12)


def test_scale_invariance():
    rng = np.random.default_rng(5)
    W = rng.standard_normal((10, 4))
    x, y = rng.standard_normal((2, 10))
    a = mode_contributions(x, y, spectral_profile(W)).contributions
    b = mode_contributions(x, y, spectral_profile(7.5 * W)).contributions
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_mode_permutation_permutes_contributions():
    rng = np.random.default_rng(6)
    p = spectral_profile(rng.standard_normal((8, 4)))
    perm = np.array([2, 0, 3, 1])
    shuffled = SpectralProfile(p.eigenvalues[perm], p.left_vectors[:, perm], p.source_dims)
    x, y = rng.standard_normal((2, 8))
    a, b = mode_contributions(x, y, p), mode_contributions(x, y, shuffled)
    np.testing.assert_allclose(b.contributions, a.contributions[perm], atol=1e-15)
    assert b.total == pytest.approx(a.total, abs=1e-14)


def test_degenerate_token():
    W = np.diag([1.0, 0.0])
    with pytest.raises(DegenerateDirection):
        mode_contributions([0.0, 1.0], [1.0, 1.0], spectral_profile(W))


def test_adjacent_similarity_constant_and_alternating():
    W = np.random.default_rng(7).standard_normal((4, 3))
    x = np.array([1.0, -0.5, 2.0, 0.3])
    np.testing.assert_allclose(adjacent_similarity(np.tile(x, (5, 1)), W), 1.0)
    np.testing.assert_allclose(adjacent_similarity(np.array([x, -x, x, -x]), W), -1.0)


def test_adjacent_similarity_matches_mode_sums():
    rng = np.random.default_rng(8)
    X, W = rng.standard_normal((20, 6)), rng.standard_normal((6, 3))
    p = spectral_profile(W)
    sims = adjacent_similarity(X, W)
    sums = [mode_contributions(X[t], X[t + 1], p).total for t in range(19)]
    np.testing.assert_allclose(sims, sums, atol=1e-10)
    assert mean_adjacent_similarity(X, W) == pytest.approx(np.mean(sims), abs=1e-12)


def test_adjacent_similarity_needs_two_tokens():
    with pytest.raises(DimensionMismatch):
        adjacent_similarity(np.ones((1, 3)), np.eye(3))


def test_concentration_flat_and_single():
    flat = SpectralProfile(np.ones(6), np.eye(6), (6, 6))
    assert concentration_stats(flat) == pytest.approx((6.0, 1.0))
    one = SpectralProfile(np.array([4.0, 0, 0]), np.eye(3), (3, 3))
    assert concentration_stats(one) == pytest.approx((1.0, 1.0))


def test_concentration_geometric():
    lam = np.array([2.0 ** -i for i in range(8)])
    s1 = sum(2.0 ** -i for i in range(8))
    s2 = sum(4.0 ** -i for i in range(8))
    pr, top = concentration_stats(SpectralProfile(lam, np.eye(8), (8, 8)), k=3)
    assert pr == pytest.approx(s1 * s1 / s2, rel=1e-14)
    assert top == pytest.approx((1 + 0.5 + 0.25) / s1, rel=1e-14)


def test_concentration_zero_spectrum():
    with pytest.raises(DegenerateDirection):
        concentration_stats(SpectralProfile(np.zeros(3), np.eye(3), (3, 3)))
