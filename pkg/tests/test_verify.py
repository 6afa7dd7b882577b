import math

import numpy as np
import pytest

from convexp import linop
from convexp import verify


def test_equivariance_scope_passes():
    results = verify.run("equivariance", seed=0)
    assert results and all(r.passed for r in results)
    assert {r.suite for r in results} == {"equivariance"}


def test_graph_scope_passes():
    results = verify.run("graph", seed=1)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_broken_trace_is_reported(monkeypatch):
    real = linop.Conv2dOperator.trace

    def off_by_one(self, shape):
        return real(self, shape) + 1.0

    monkeypatch.setattr(linop.Conv2dOperator, "trace", off_by_one)
    failed = [r for r in verify.run("expm", seed=0) if not r.passed]
    assert failed
    assert any(r.suite == "expm" and "logdet" in r.property for r in failed)
    assert all(r.seed == 0 for r in failed)


def test_unknown_scope():
    with pytest.raises(ValueError):
        verify.run("everything")


def test_check_result_and_csv():
    ok = verify.CheckResult("expm", "x", 3, 10, 1e-14, 1e-10)
    bad = verify.CheckResult("expm", "y", 3, 10, float("nan"), 1e-10)
    assert ok.passed and not bad.passed
    assert "PASS" in ok.line().upper() and "FAIL" in bad.line().upper()
    rows = verify.to_csv([ok, bad]).splitlines()
    assert rows[0] == "suite,property,seed,trials,worst,tolerance,status"
    assert rows[1].endswith(",pass") and rows[2].endswith(",fail")
    assert rows[2].split(",")[4] == "nan"


def test_random_generators_respect_caps():
    rng = np.random.default_rng(0)
    from convexp import dense
    for _ in range(5):
        op, shape = verify.random_conv_operator(rng)
        sigma = np.linalg.norm(dense.build_equivalent_matrix(op, shape), 2)
        assert sigma == pytest.approx(verify.COEFF, rel=1e-4)
        A = verify.random_adjacency(rng, 5)
        assert np.array_equal(A, A.T) and np.all(np.diag(A) == 0)
