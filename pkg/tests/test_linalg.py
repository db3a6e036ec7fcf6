import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resilient_mlp.linalg import (
    Rng,
    ShapeError,
    add,
    as_matrix,
    elementwise,
    hadamard,
    matmul,
    relu,
    rng_uniform,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    m = as_matrix([[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)


def test_matmul_row_by_column():
    np.testing.assert_array_equal(matmul(as_matrix([[1, 2]]), as_matrix([[3], [4]])), [[11.0]])


def test_matmul_matches_triple_loop():
    g = np.random.default_rng(0)
    a, b = g.normal(size=(5, 4)), g.normal(size=(4, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_basics():
    np.testing.assert_array_equal(relu(as_matrix([[-1, 2]])), [[0.0, 2.0]])
    np.testing.assert_array_equal(add(as_matrix([[1]]), as_matrix([[2]])), [[3.0]])
    with pytest.raises(ShapeError):
        add(np.ones((1, 2)), np.ones((2, 1)))


def test_hadamard_matches_scalar_loop():
    g = np.random.default_rng(1)
    a, b = g.normal(size=(3, 3)), g.normal(size=(3, 3))
    expected = np.array([[a[i, j] * b[i, j] for j in range(3)] for i in range(3)])
    np.testing.assert_array_equal(hadamard(a, b), expected)


def test_elementwise_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        with np.errstate(divide="ignore"):
            elementwise(np.array([[1.0]]), lambda x: x / 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_associative_and_transpose(n, m, p, q, seed):
    g = np.random.default_rng(seed)
    a, b, c = g.normal(size=(n, m)), g.normal(size=(m, p)), g.normal(size=(p, q))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9 * np.abs(left).max())
    ab_t = matmul(a, b).T
    bt_at = matmul(b.T, a.T)
    assert ab_t.shape == bt_at.shape
    np.testing.assert_allclose(ab_t, bt_at, atol=1e-12, rtol=0)


def test_rng_determinism():
    assert np.array_equal(rng_uniform(Rng(42), 10_000), rng_uniform(Rng(42), 10_000))
    assert not np.array_equal(rng_uniform(Rng(42), 10), rng_uniform(Rng(43), 10))


def test_rng_empty_draw():
    assert rng_uniform(Rng(1), 0).shape == (0,)


def test_rng_mean():
    # Uniform variance 1/12 -> std of the mean over 1e6 draws is ~2.9e-4,
    # so +-1e-3 is a 3.4 sigma band.
    u = rng_uniform(Rng(7), 10**6)
    assert 0.499 <= u.mean() <= 0.501
    assert u.min() >= 0.0 and u.max() < 1.0


def test_rng_split_streams_independent_and_reproducible():
    a1, b1 = Rng(5).split(2)
    a2, b2 = Rng(5).split(2)
    assert np.array_equal(a1.uniform(100), a2.uniform(100))
    assert not np.array_equal(Rng(5).split(2)[0].uniform(100), b2.uniform(100))
