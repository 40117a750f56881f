import numpy as np
import pytest

import linalg


def test_matmul_identity_and_hand_case():
    m = np.arange(12, dtype=np.float64).reshape(3, 4)
    assert np.array_equal(linalg.matmul(np.eye(3), m), m)
    out = linalg.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
    assert out.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    naive = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                naive[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(linalg.matmul(a, b) - naive)) <= 1e-12


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\) x \(2, 3\)"):
        linalg.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_l2_normalize():
    assert np.allclose(linalg.l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    assert np.allclose(linalg.l2_normalize(u, 5.0), 5.0 * u)
    v = np.random.default_rng(1).normal(size=17)
    assert abs(np.linalg.norm(linalg.l2_normalize(v, 2.5)) - 2.5) <= 1e-12


def test_matmul_is_associative():
    rng = np.random.default_rng(3)
    a, b, c = rng.normal(size=(6, 5)), rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    left = linalg.matmul(linalg.matmul(a, b), c)
    right = linalg.matmul(a, linalg.matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-9


def test_l2_normalize_is_idempotent():
    rng = np.random.default_rng(4)
    for target in (1.0, 5.0):
        v = rng.normal(size=12) * 30.0
        once = linalg.l2_normalize(v, target)
        assert np.max(np.abs(linalg.l2_normalize(once, target) - once)) <= 1e-12


def test_l2_normalize_zero_vector():
    with pytest.raises(ValueError, match="cannot normalize zero vector"):
        linalg.l2_normalize(np.zeros(4))
    # the eps form used inside the head never divides by zero
    assert np.array_equal(linalg.l2_normalize(np.zeros(4), 5.0, eps=1e-12), np.zeros(4))


def test_saxpy():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=6), rng.normal(size=6)
    assert np.array_equal(linalg.saxpy(0.0, x, y), y)
    assert np.array_equal(linalg.saxpy(1.0, x, np.zeros(6)), x)
    expected = [-0.3 * xi + yi for xi, yi in zip(x, y)]
    assert np.allclose(linalg.saxpy(-0.3, x, y), expected, rtol=0, atol=1e-15)
    with pytest.raises(ValueError, match="length mismatch"):
        linalg.saxpy(1.0, np.zeros(3), np.zeros(4))


def test_as_matrix_validates():
    assert linalg.as_matrix([1, 2, 3, 4, 5, 6], 2, 3).shape == (2, 3)
    with pytest.raises(ValueError):
        linalg.as_matrix([1, 2, 3], 2, 2)
    with pytest.raises(ValueError):
        linalg.check_finite(np.array([1.0, np.nan]))
