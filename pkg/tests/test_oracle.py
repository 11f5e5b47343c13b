import numpy as np
import pytest

from kvmerge import _faults
from kvmerge.attention import attention_forward, hessian_block, key_gradient
from kvmerge.errors import DegenerateDirection, DegenerateSystem
from kvmerge.merge import merge_key_exact, scalar_sensitivities
from kvmerge.oracle import (
    FdConfig,
    aligned_instance,
    alignment_report,
    angled_residuals,
    dense_merge_oracle,
    dense_system_rank,
    fd_hessian_block,
    fd_key_gradient,
    quadratic_model_gradient,
    quadratic_objective_value,
    random_instance,
    rank_data,
    residual_instance,
    run_suite,
    spearman,
)


def test_fd_config_validation():
    with pytest.raises(ValueError):
        FdConfig(0.0)
    with pytest.raises(ValueError):
        FdConfig(1e-5, "forward")


def test_fd_gradient_zero_cases():
    q, K, V, _ = random_instance(np.random.default_rng(0), 5, 3)
    assert np.allclose(fd_key_gradient(q, K, V, np.zeros(3), 2), 0.0)
    assert np.allclose(fd_key_gradient(q, K[:1], V[:1], np.ones(3), 0), 0.0)


def test_fd_hessian_cases():
    q, K, V, _ = random_instance(np.random.default_rng(1), 5, 3)
    assert np.allclose(fd_hessian_block(q, K, V, np.zeros(3), 1, 2), 0.0)
    q2, K2, V2 = np.array([1.0, 0.0]), np.array([[0.0, 1.0], [0.0, -1.0]]), np.eye(2)
    assert np.max(np.abs(fd_hessian_block(q2, K2, V2, [0.4, -1.3], 0, 0))) < 1e-6


def test_fd_hessian_symmetry():
    q, K, V, E = random_instance(np.random.default_rng(2), 6, 4)
    np.testing.assert_allclose(fd_hessian_block(q, K, V, E, 1, 4), fd_hessian_block(q, K, V, E, 4, 1).T, atol=1e-4)


def test_fd_matches_analytic():
    q, K, V, E = random_instance(np.random.default_rng(3), 8, 4)
    s = attention_forward(q, K, V)
    for i in range(8):
        g = key_gradient(s, E, i)
        assert np.linalg.norm(g - fd_key_gradient(q, K, V, E, i)) <= 1e-6 * np.linalg.norm(g)
    h = hessian_block(s, E, 2, 3).materialize()
    assert np.linalg.norm(h - fd_hessian_block(q, K, V, E, 2, 3)) <= 1e-4 * np.linalg.norm(h)


def test_dense_oracle_rank_and_degeneracy():
    q, K, V, E = random_instance(np.random.default_rng(4), 6, 5)
    s = attention_forward(q, K, V)
    assert dense_system_rank(s, E, 1) == 1
    with pytest.raises(DegenerateSystem):
        dense_merge_oracle(s, np.zeros(5), 1)
    assert dense_system_rank(s, np.zeros(5), 1) == 0


def test_stationarity_and_curvature():
    rng = np.random.default_rng(5)
    for _ in range(30):
        q, K, V, E = random_instance(rng, 7, 5)
        s = attention_forward(q, K, V)
        k = merge_key_exact(s, E, 2)
        qhat = q / np.linalg.norm(q)
        assert abs(qhat @ quadratic_model_gradient(s, E, 2, k)) < 1e-8
        g11, g12, g22 = scalar_sensitivities(s, E, 2)
        gamma = g11 + 2 * g12 + g22
        v0 = quadratic_objective_value(s, E, 2, k)
        for delta in (1e-2, -1e-2):
            dv = quadratic_objective_value(s, E, 2, k + delta * qhat) - v0
            assert np.sign(dv) == np.sign(gamma)


def test_zero_displacement_leaves_linear_terms_only():
    q, K, V, E = random_instance(np.random.default_rng(6), 5, 3)
    s = attention_forward(q, K, V)
    K2 = K.copy()
    K2[3] = K2[2]
    s2 = attention_forward(q, K2, V)
    assert quadratic_objective_value(s2, E, 2, K2[2]) == 0.0
    lin = quadratic_objective_value(s2, E, 2, K2[2], include_linear=True)
    assert lin == 0.0
    assert quadratic_objective_value(s, E, 2, K[2] + 0.1, include_linear=True) != 0.0


def test_alignment_homogeneous_is_exact():
    rng = np.random.default_rng(7)
    for _ in range(20):
        r = rng.standard_normal(5)
        s = residual_instance(rng, 7, 5, r, r)
        np.testing.assert_allclose(s.residual(1), r, atol=1e-12)
        assert alignment_report(s, rng.standard_normal(5), 1).max_deviation == 0.0


def test_alignment_orthogonal_e():
    rng = np.random.default_rng(8)
    r1, r2 = np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.6, 0.8, 0.0, 0.0])
    s = residual_instance(rng, 6, 4, r1, r2)
    rep = alignment_report(s, [0.0, 0.0, 1.0, 0.0], 1)
    assert max(abs(rep.cos_e_c11), abs(rep.cos_e_c22), abs(rep.cos_e_c12)) < 1e-12


def test_alignment_degenerate():
    s = attention_forward([1.0, 0.0], [[0.0, 1.0], [0.0, -1.0]], np.eye(2))
    with pytest.raises(DegenerateDirection):
        alignment_report(s, [1.0, 0.0], 0)


def test_angled_residuals_have_requested_angle():
    rng = np.random.default_rng(9)
    a, b, _, _ = angled_residuals(rng, 6, np.deg2rad(17.0))
    assert np.degrees(np.arccos(a @ b / np.linalg.norm(a) / np.linalg.norm(b))) == pytest.approx(17.0, abs=1e-9)


def test_aligned_instance_satisfies_equalities():
    rng = np.random.default_rng(10)
    s, E = aligned_instance(rng, 6, 5)
    assert alignment_report(s, E, 1).max_deviation < 1e-12


def test_rank_and_spearman_against_hand_values():
    np.testing.assert_array_equal(rank_data([10.0, 30.0, 20.0, 20.0]), [1.0, 4.0, 2.5, 2.5])
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    # d = (0, 0, 1, -1): 1 - 6*2 / (4*15) = 0.8
    assert spearman([1, 2, 3, 4], [1, 2, 4, 3]) == pytest.approx(0.8)


def test_suite_passes_and_detects_faults():
    assert all(r.passed for r in run_suite(1, (2, 4), (2, 3), 20))
    for fault in sorted(_faults.KNOWN):
        with _faults.inject(fault):
            assert not all(r.passed for r in run_suite(1, (2, 4), (2, 3), 20)), fault
