import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from convexp import datasets as ds
from convexp.estimator import FlowDensityEstimator


@pytest.fixture(scope="module")
def mog_data():
    return ds.sample(ds.get_spec("mog4", seed=0), 512).node_features


@pytest.fixture(scope="module")
def fitted(mog_data):
    return FlowDensityEstimator(model="graphflow+exp", iters=60, hidden=16, subflows=1,
                                batch_size=64).fit(mog_data)


def test_params_and_clone():
    est = FlowDensityEstimator(iters=5, lr=0.01)
    params = est.get_params()
    assert params["iters"] == 5 and params["lr"] == 0.01
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(hidden=8)
    assert est.hidden == 8


def test_not_fitted():
    with pytest.raises(NotFittedError):
        FlowDensityEstimator().transform(np.zeros((2, 4, 2)))


def test_fit_lowers_loss(fitted):
    curve = fitted.loss_curve_
    assert len(curve) == 60
    assert np.mean(curve[-10:]) < np.mean(curve[:10])


def test_transform_inverse_round_trip(fitted, mog_data):
    z = fitted.transform(mog_data[:20])
    assert z.shape == (20, 8)
    back = fitted.inverse_transform(z)
    np.testing.assert_allclose(back, mog_data[:20], atol=1e-3)


def test_scores(fitted, mog_data):
    s = fitted.score_samples(mog_data[:30])
    assert s.shape == (30,) and np.all(np.isfinite(s))
    assert fitted.score(mog_data[:30]) == pytest.approx(s.mean())
    assert fitted.nll(mog_data[:30]) == pytest.approx(-s.mean() / 4)


def test_wrong_shape_rejected(fitted):
    with pytest.raises(ValueError):
        fitted.score_samples(np.zeros((3, 5, 2)))
    with pytest.raises(ValueError):
        fitted.score_samples(np.full((3, 4, 2), np.nan))


def test_sample_is_seeded(fitted):
    a = fitted.sample(10, random_state=3)
    assert a.shape == (10, 4, 2) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, fitted.sample(10, random_state=3))


def test_fit_is_deterministic(mog_data):
    kw = dict(model="coupling", iters=5, hidden=8, subflows=1, batch_size=32, random_state=4)
    a = FlowDensityEstimator(**kw).fit(mog_data).loss_curve_
    b = FlowDensityEstimator(**kw).fit(mog_data).loss_curve_
    assert a == b


def test_conv_sylvester_on_moons():
    X = ds.sample(ds.MoonsSpec(seed=0), 400)
    est = FlowDensityEstimator(model="convsylvester2d", iters=150, hidden=8, subflows=1,
                               batch_size=64).fit(X)
    assert np.mean(est.loss_curve_[-20:]) < np.mean(est.loss_curve_[:20])
    draws = est.sample(50, random_state=1)
    assert draws.shape == (50, 2) and np.all(np.isfinite(draws))
    back = est.inverse_transform(est.transform(X[:10]))
    np.testing.assert_allclose(back, X[:10], atol=1e-3)
    with pytest.raises(ValueError):
        est.fit(np.zeros((10, 3)))
