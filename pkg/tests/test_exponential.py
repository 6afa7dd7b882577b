import math
import warnings

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings, strategies as st

from convexp import dense, linop
from convexp import exponential as ex
from convexp.linop import Conv2dOperator, GraphConvOperator


def normalized_conv(rng, shape, coeff=0.9, mode="zero"):
    op = Conv2dOperator(rng.standard_normal((shape[0], shape[0], 3, 3)), mode)
    M = dense.build_equivalent_matrix(op, shape)
    return op.scaled(coeff / np.linalg.norm(M, 2))


@pytest.mark.parametrize("mode", ["zero", "periodic"])
def test_expv_matches_scipy_expm(rng, mode):
    shape = (2, 4, 5)
    op = normalized_conv(rng, shape, coeff=1.5, mode=mode)
    M = dense.build_equivalent_matrix(op, shape)
    x = rng.standard_normal(shape)
    z = ex.expv(op, x, ex.ExpConfig.terms(25)).numpy().ravel()
    np.testing.assert_allclose(z, scipy.linalg.expm(M) @ x.ravel(), atol=1e-12)


def test_expv_graph_operator_matches_scipy(rng):
    A = np.ones((4, 4)) - np.eye(4)
    op = GraphConvOperator(0.3 * rng.standard_normal((3, 3)), 0.5 * rng.standard_normal((3, 3)),
                           A)
    M = dense.build_equivalent_matrix(op, (4, 3))
    x = rng.standard_normal((4, 3))
    z = ex.expv(op, x, ex.ExpConfig.terms(20)).numpy().ravel()
    np.testing.assert_allclose(z, scipy.linalg.expm(M) @ x.ravel(), atol=1e-12)


def test_zero_operator_is_identity(rng):
    x = torch.as_tensor(rng.standard_normal((3, 2, 2)))
    assert torch.equal(ex.expv(linop.ZeroOperator(), x), x)


def test_scaled_identity_gives_scalar_exponential(rng):
    x = torch.as_tensor(rng.standard_normal(5))
    z = ex.expv(linop.ScaledIdentity(0.7), x, ex.ExpConfig.terms(25))
    np.testing.assert_allclose(z.numpy(), math.exp(0.7) * x.numpy(), rtol=1e-14)


def test_fixed_terms_equal_partial_sum(rng):
    shape = (1, 3, 3)
    op = normalized_conv(rng, shape)
    M = dense.build_equivalent_matrix(op, shape)
    x = rng.standard_normal(shape).ravel()
    partial = sum(np.linalg.matrix_power(M, i) @ x / math.factorial(i) for i in range(7))
    z = ex.expv(op, x.reshape(shape), ex.ExpConfig.terms(6)).numpy().ravel()
    np.testing.assert_allclose(z, partial, atol=1e-14)


def test_inverse_round_trip(rng):
    shape = (2, 5, 5)
    op = normalized_conv(rng, shape)
    x = torch.as_tensor(rng.standard_normal(shape))
    cfg = ex.ExpConfig.terms(20)
    back = ex.inverse_expv(op, ex.expv(op, x, cfg), cfg)
    assert float((back - x).abs().max()) < 1e-12


def test_logdet_exp_is_trace(rng):
    shape = (2, 3, 4)
    op = normalized_conv(rng, shape, coeff=2.0)
    E = dense.dense_expm(dense.build_equivalent_matrix(op, shape))
    assert float(ex.logdet_exp(op, shape)) == pytest.approx(dense.logdet_via_lu(E), abs=1e-10)


def test_adaptive_mode_stops_early_and_reports(rng):
    shape = (1, 4, 4)
    op = normalized_conv(rng, shape, coeff=0.1)
    x = rng.standard_normal(shape)
    z, info = ex.expv(op, x, ex.ExpConfig.adaptive(1e-10), return_info=True)
    assert info.converged and info.terms < 20
    assert info.last_rel_term <= 1e-10
    M = dense.build_equivalent_matrix(op, shape)
    np.testing.assert_allclose(z.numpy().ravel(), scipy.linalg.expm(M) @ x.ravel(), atol=1e-10)


def test_adaptive_mode_batch_uses_worst_sample(rng):
    shape = (1, 3, 3)
    op = normalized_conv(rng, shape, coeff=0.5)
    x = rng.standard_normal((2,) + shape)
    x[0] *= 1e-6                     # tiny sample must still reach the tolerance
    _, info = ex.expv(op, x, ex.ExpConfig.adaptive(1e-9), event_ndim=3, return_info=True)
    _, info_big = ex.expv(op, x[1], ex.ExpConfig.adaptive(1e-9), return_info=True)
    assert info.terms >= info_big.terms


def test_truncation_warning(rng):
    op = linop.ScaledIdentity(5.0)
    with pytest.warns(ex.SeriesTruncationWarning):
        _, info = ex.expv(op, np.ones(3), ex.ExpConfig.adaptive(1e-12, max_terms=4),
                          return_info=True)
    assert not info.converged and info.terms == 4


def test_fixed_mode_never_warns(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ex.expv(linop.ScaledIdentity(5.0), np.ones(3), ex.ExpConfig.terms(3))


def test_shape_change_is_rejected():
    class Bad(linop.LinearOperator):
        def apply(self, x):
            return x[..., :-1]

    with pytest.raises(ValueError):
        ex.expv(Bad(), np.ones(4))


def test_config_validation():
    with pytest.raises(ValueError):
        ex.ExpConfig(max_terms=0)
    with pytest.raises(ValueError):
        ex.ExpConfig(mode="sometimes")
    assert ex.ExpConfig.terms(6).n_terms == 6
    assert ex.TRAINING.n_terms == 6


def test_term_bound_values():
    assert ex.term_bound(0.9, 1) == pytest.approx(0.9)
    assert ex.term_bound(0.9, 2) == pytest.approx(0.405)
    assert ex.term_bound(3.0, 3) == pytest.approx(4.5)
    assert ex.term_bound(0.0, 3) == 0.0
    assert ex.term_bound(2.0, 0) == 1.0
    assert ex.term_bound(50.0, 400) == pytest.approx(
        math.exp(400 * math.log(50) - math.lgamma(401)))
    with pytest.raises(ValueError):
        ex.term_bound(-1.0, 2)


def test_bound_shape_for_small_and_large_norms():
    b = [ex.term_bound(0.9, i) for i in range(1, 15)]
    assert all(x > y for x, y in zip(b, b[1:]))
    b3 = [ex.term_bound(3.0, i) for i in range(1, 15)]
    peak = max(range(len(b3)), key=lambda i: b3[i]) + 1
    assert peak in (2, 3)
    assert b3[-1] < b3[0]


def test_convergence_report_is_below_bound(rng):
    shape = (2, 4, 4)
    op = normalized_conv(rng, shape, coeff=0.9)
    rows = ex.convergence_report(op, rng.standard_normal(shape), 15, norm=0.9)
    assert rows[0] == (0, 1.0, 1.0)
    for i, actual, bound in rows[1:]:
        assert actual <= bound * (1 + 1e-12)
    # equality for a scaled identity
    rows = ex.convergence_report(linop.ScaledIdentity(0.9), np.ones(4), 8, norm=0.9)
    for i, actual, bound in rows:
        assert actual == pytest.approx(bound, rel=1e-12)


def test_report_csv():
    text = ex.report_to_csv([(0, 1.0, 1.0), (1, 0.25, 0.5)])
    assert text.splitlines() == ["i,actual_rel_norm,bound", "0,1.0,1.0", "1,0.25,0.5"]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), coeff=st.floats(0.05, 0.9))
def test_property_six_terms_suffice(seed, coeff):
    r = np.random.default_rng(seed)
    shape = (int(r.integers(1, 3)), int(r.integers(2, 5)), int(r.integers(2, 5)))
    op = normalized_conv(r, shape, coeff=coeff)
    M = dense.build_equivalent_matrix(op, shape)
    x = r.standard_normal(shape)
    ref = scipy.linalg.expm(M) @ x.ravel()
    z = ex.expv(op, x, ex.ExpConfig.terms(6)).numpy().ravel()
    # remainder bound: sum_{i>6} c^i / i! <= c^7 / 7! * e^c
    bound = coeff ** 7 / math.factorial(7) * math.exp(coeff)
    assert np.linalg.norm(z - ref) <= bound * np.linalg.norm(x) * (1 + 1e-9) + 1e-14
