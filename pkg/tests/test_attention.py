import numpy as np
import pytest

from kvmerge.attention import (
    attention_forward,
    full_hessian,
    hessian_block,
    hessian_coefficient,
    key_gradient,
    key_gradients,
    multihead_attention,
)
from kvmerge.errors import DimensionMismatch, EmptySequence, IndexOutOfRange
from kvmerge.numerics import svd
from kvmerge.oracle import fd_full_hessian, fd_key_gradient, random_instance


def _snap(seed, n=8, d=4):
    q, K, V, E = random_instance(np.random.default_rng(seed), n, d)
    return attention_forward(q, K, V), (q, K, V, E)


def test_single_token():
    s = attention_forward([0.3, -1.0], [[5.0, 2.0]], [[1.0, 2.0, 3.0]])
    assert s.scores.tolist() == [1.0]
    np.testing.assert_array_equal(s.output, [1.0, 2.0, 3.0])


def test_zero_query_gives_uniform_scores():
    V = np.arange(12.0).reshape(4, 3)
    s = attention_forward(np.zeros(2), np.random.default_rng(0).standard_normal((4, 2)), V)
    np.testing.assert_allclose(s.scores, 0.25)
    np.testing.assert_allclose(s.output, V.mean(axis=0))


def test_hand_evaluated_scores():
    # q . k_1 = sqrt(2), scaled by 1/sqrt(2) gives logits (1, 0)
    r = 2.0 ** 0.25
    s = attention_forward([r, 0.0], [[r, 0.0], [0.0, r]], [[1.0], [0.0]])
    np.testing.assert_allclose(s.logits, [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(s.scores, [0.73106, 0.26894], atol=1e-5)


def test_root_two_keys_give_root_two_logit():
    r = np.sqrt(2.0)
    s = attention_forward([r, 0.0], [[r, 0.0], [0.0, r]], [[1.0], [0.0]])
    np.testing.assert_allclose(s.logits, [r, 0.0], atol=1e-15)


def test_snapshot_invariants():
    s, (q, K, V, _) = _snap(1, n=6, d=3)
    assert abs(s.scores.sum() - 1) < 1e-12
    np.testing.assert_allclose(s.logits, K @ q / np.sqrt(3), atol=1e-12)
    np.testing.assert_allclose(s.output, s.scores @ V, atol=1e-12)
    assert s.n == 6 and s.d_k == 3 and s.d_v == 3


def test_forward_errors():
    with pytest.raises(EmptySequence):
        attention_forward([1.0], [], [])
    with pytest.raises(DimensionMismatch):
        attention_forward([1.0, 2.0], [[1.0, 2.0]], [[1.0], [2.0]])
    with pytest.raises(DimensionMismatch):
        attention_forward([1.0, 2.0, 3.0], [[1.0, 2.0]], [[1.0]])


def test_gradient_zero_residual():
    s = attention_forward([1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], [[2.0], [2.0]])
    assert not np.any(key_gradient(s, [1.0], 0))


def test_gradient_zero_when_e_orthogonal_to_residual():
    s = attention_forward([1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 5.0], [3.0, 5.0]])
    # residuals lie along the first axis
    assert np.allclose(key_gradient(s, [0.0, 1.0], 0), 0.0, atol=1e-15)


def test_gradient_matches_finite_differences():
    s, (q, K, V, E) = _snap(2)
    for i in range(s.n):
        g, fd = key_gradient(s, E, i), fd_key_gradient(q, K, V, E, i)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_gradients_batch_matches_single():
    s, (_, _, _, E) = _snap(3)
    np.testing.assert_allclose(key_gradients(s, E), [key_gradient(s, E, i) for i in range(s.n)], atol=1e-15)


def test_index_errors():
    s, (_, _, _, E) = _snap(4, n=3)
    with pytest.raises(IndexOutOfRange):
        key_gradient(s, E, 3)
    with pytest.raises(IndexOutOfRange):
        hessian_block(s, E, 0, -1)


def test_half_half_diagonal_blocks_vanish():
    s = attention_forward([1.0, 0.0], [[0.0, 1.0], [0.0, -1.0]], [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(s.scores, [0.5, 0.5])
    assert hessian_coefficient(s, [0.3, 0.7], 0, 0) == 0.0
    assert hessian_coefficient(s, [0.3, 0.7], 1, 1) == 0.0


def test_all_residuals_zero_gives_zero_blocks():
    s = attention_forward([1.0, 0.5], np.eye(2), [[4.0, 1.0], [4.0, 1.0]])
    assert all(hessian_coefficient(s, [1.0, -2.0], i, j) == 0 for i in range(2) for j in range(2))


def test_block_coefficient_formula():
    s, (_, _, V, E) = _snap(5, n=5, d=3)
    a, o = s.scores, s.output
    assert hessian_coefficient(s, E, 2, 2) == pytest.approx(E @ (a[2] * (1 - 2 * a[2]) * (V[2] - o)) / 3, rel=1e-14)
    assert hessian_coefficient(s, E, 1, 3) == pytest.approx(-E @ (a[1] * a[3] * (V[1] + V[3] - 2 * o)) / 3, rel=1e-14)


def test_off_diagonal_blocks_symmetric_exactly():
    s, (_, _, _, E) = _snap(6)
    for i in range(s.n):
        for j in range(s.n):
            assert np.array_equal(hessian_block(s, E, i, j).materialize(), hessian_block(s, E, j, i).materialize())


def test_blocks_rank_one():
    s, (_, _, _, E) = _snap(7)
    blk = hessian_block(s, E, 2, 3)
    np.testing.assert_array_equal(blk.materialize(), blk.coefficient * np.outer(s.query, s.query))
    sig = svd(blk.materialize())[1]
    assert sig[1] < 1e-12 * sig[0]


def test_full_hessian_matches_finite_differences():
    s, (q, K, V, E) = _snap(8)
    H = full_hessian(s, E)
    assert np.linalg.norm(H - fd_full_hessian(q, K, V, E)) / np.linalg.norm(H) < 1e-5


def test_multihead_matches_single_head():
    rng = np.random.default_rng(9)
    q, K, V = rng.standard_normal((3, 4)), rng.standard_normal((3, 7, 4)), rng.standard_normal((3, 7, 5))
    scores, out = multihead_attention(q, K, V)
    for h in range(3):
        s = attention_forward(q[h], K[h], V[h])
        np.testing.assert_allclose(scores[h], s.scores, atol=1e-15)
        np.testing.assert_allclose(out[h], s.output, atol=1e-14)
