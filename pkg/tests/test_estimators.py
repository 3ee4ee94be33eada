import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from deepfp.estimators import DeepBSDESolver, DeepFictitiousPlay
from deepfp.exceptions import ShapeError


def _toy(**kw):
    return DeepBSDESolver(driver=lambda t, x, z: np.zeros(np.shape(z)[:-1]),
                          terminal=lambda x: x[..., 0], sigma=np.ones((1, 1)), **kw)


def test_parameters_round_trip_through_clone():
    est = _toy(steps=5, hidden=(4,))
    twin = clone(est)
    assert twin.get_params()["steps"] == 5 and twin.get_params()["hidden"] == (4,)
    est.set_params(lr=1e-3)
    assert est.lr == 1e-3


def test_unfitted_estimators_refuse_to_predict():
    with pytest.raises(NotFittedError):
        _toy().predict(np.zeros((2, 1)))
    with pytest.raises(NotFittedError):
        DeepFictitiousPlay().predict(np.zeros((2, 5)))


def test_bsde_solver_learns_the_martingale():
    est = _toy(steps=1500, hidden=(16, 16), n_steps=5, lr=2e-3, batch=256).fit()
    x = np.linspace(-0.8, 0.8, 9)[:, None]
    assert np.max(np.abs(est.predict(x) - x[:, 0])) < 0.1
    assert np.max(np.abs(est.predict_z(x, t=0.4) - 1.0)) < 0.1
    with pytest.raises(ShapeError):
        est.predict(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        est.predict(np.array([[np.nan]]))


def test_fictitious_play_estimator():
    est = DeepFictitiousPlay(N=3, n_steps=5, stages=2, hidden=(8,), steps=200, batch=64,
                             lr=2e-3).fit()
    X = np.random.default_rng(0).uniform(-0.5, 0.5, size=(50, 3))
    pred = est.predict(X, t=0.2)
    assert pred.shape == (50, 3)
    assert len(est.report_.stages) == 2 and est.delta0_ > 0
    # the score is the negative mean squared control gap, and training beats doing nothing
    zero = -float(np.mean((est.riccati_.policy_coefficient(0.2)
                           * (X.mean(axis=1, keepdims=True) - X)) ** 2))
    assert zero < est.score(X, t=0.2) <= 0
