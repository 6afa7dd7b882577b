import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings, strategies as st

from convexp import dense
from convexp.linop import Conv2dOperator, ScaledIdentity


@pytest.mark.parametrize("n", [1, 3, 8, 20])
@pytest.mark.parametrize("scale", [0.1, 1.0, 5.0])
def test_dense_expm_matches_scipy(rng, n, scale):
    M = scale * rng.standard_normal((n, n))
    ref = scipy.linalg.expm(M)
    np.testing.assert_allclose(dense.dense_expm(M), ref, rtol=1e-11, atol=1e-11)


def test_dense_expm_of_zero_is_identity():
    np.testing.assert_array_equal(dense.dense_expm(np.zeros((4, 4))), np.eye(4))


def test_dense_expm_diagonal():
    d = np.array([-1.0, 0.5, 2.0])
    np.testing.assert_allclose(dense.dense_expm(np.diag(d)), np.diag(np.exp(d)), rtol=1e-13)


def test_dense_expm_rejects_non_square():
    with pytest.raises(ValueError):
        dense.dense_expm(np.zeros((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2 ** 31 - 1))
def test_logdet_via_lu_matches_slogdet(n, seed):
    M = np.random.default_rng(seed).standard_normal((n, n))
    sign, ref = np.linalg.slogdet(M)
    logabs, s = dense.logdet_via_lu(M, return_sign=True)
    assert s == sign
    assert logabs == pytest.approx(ref, abs=1e-9)


def test_logdet_via_lu_singular():
    M = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(dense.SingularMatrixError):
        dense.logdet_via_lu(M)
    with pytest.raises(dense.SingularMatrixError):
        dense.logdet_via_lu(np.zeros((3, 3)))


def test_logdet_of_exponential_is_trace(rng):
    M = 0.5 * rng.standard_normal((6, 6))
    assert dense.logdet_via_lu(dense.dense_expm(M)) == pytest.approx(np.trace(M), abs=1e-10)


def test_equivalent_matrix_of_scaled_identity():
    M = dense.build_equivalent_matrix(ScaledIdentity(2.5), (2, 3))
    np.testing.assert_array_equal(M, 2.5 * np.eye(6))


def test_equivalent_matrix_of_delta_kernel_is_identity():
    w = torch.zeros(2, 2, 3, 3, dtype=torch.float64)
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    M = dense.build_equivalent_matrix(Conv2dOperator(w), (2, 3, 4))
    np.testing.assert_array_equal(M, np.eye(24))


def test_equivalent_matrix_of_shift_kernel():
    # a kernel tap one pixel to the right reads x[i, j + 1] (zero past the edge)
    w = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    w[0, 0, 1, 2] = 1.0
    M = dense.build_equivalent_matrix(Conv2dOperator(w), (1, 2, 3))
    ref = np.zeros((6, 6))
    for i in range(2):
        for j in range(2):
            ref[i * 3 + j, i * 3 + j + 1] = 1.0
    np.testing.assert_array_equal(M, ref)


def test_equivalent_matrix_column_major():
    op = ScaledIdentity(1.0)
    np.testing.assert_array_equal(dense.build_equivalent_matrix(op, (3, 2), order="F"),
                                  np.eye(6))


def test_dimension_cap():
    with pytest.raises(dense.DimensionCapError):
        dense.build_equivalent_matrix(ScaledIdentity(1.0), (4, 32, 33))
    with pytest.raises(dense.DimensionCapError):
        dense.build_equivalent_matrix(ScaledIdentity(1.0), (10,), cap=9)


def test_non_preserving_operator_rejected():
    class Shrink:
        def apply(self, x):
            return x[..., :-1]

    with pytest.raises(ValueError, match="dimensionality"):
        dense.build_equivalent_matrix(Shrink(), (4,))


def test_numerical_jacobian_linear(rng):
    A = rng.standard_normal((5, 4))
    J = dense.numerical_jacobian(lambda x: A @ x, rng.standard_normal(4))
    np.testing.assert_allclose(J, A, atol=1e-8)


def test_numerical_jacobian_nonlinear():
    x = np.array([0.3, -1.2])
    J = dense.numerical_jacobian(lambda v: np.array([np.sin(v[0]) * v[1], v[1] ** 3]), x)
    ref = np.array([[np.cos(0.3) * -1.2, np.sin(0.3)], [0.0, 3 * 1.44]])
    np.testing.assert_allclose(J, ref, atol=1e-8)


def test_matrix_csv_round_trip_is_exact(rng):
    M = rng.standard_normal((5, 7)) * 10.0 ** rng.integers(-8, 8, size=(5, 7))
    np.testing.assert_array_equal(dense.matrix_from_csv(dense.matrix_to_csv(M)), M)
