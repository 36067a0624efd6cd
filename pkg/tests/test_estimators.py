import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mfcswarm import HistogramEncoder, MeanFieldPPO
from mfcswarm.meanfield import MeanFieldAction


def test_encoder_params_and_clone():
    enc = HistogramEncoder(bins_per_axis=4)
    assert enc.get_params() == {"bins_per_axis": 4, "box_half_width": 2.0}
    twin = clone(enc)
    assert twin is not enc and twin.get_params() == enc.get_params()


def test_encoder_transform_rows_sum_to_one():
    rng = np.random.default_rng(0)
    X = rng.uniform(-2, 2, (5, 40, 2))
    H = HistogramEncoder().fit_transform(X)
    assert H.shape == (5, 36)
    np.testing.assert_allclose(H.sum(axis=1), 1.0)
    assert np.all(H * 40 == np.round(H * 40))


def test_encoder_ragged_swarms_and_names():
    enc = HistogramEncoder(bins_per_axis=2).fit([np.zeros((1, 2))])
    H = enc.transform([np.array([[-1.0, -1.0]]), np.array([[1.0, 1.0], [1.0, -1.0]])])
    assert H[0, 0] == 1.0
    assert sorted(H[1]) == [0.0, 0.0, 0.5, 0.5]
    assert list(enc.get_feature_names_out()) == ["bin0", "bin1", "bin2", "bin3"]


def test_encoder_requires_fit_and_valid_input():
    with pytest.raises(NotFittedError):
        HistogramEncoder().transform(np.zeros((1, 3, 2)))
    with pytest.raises(ValueError):
        HistogramEncoder().fit(np.full((1, 3, 2), 5.0))


def test_ppo_estimator_params_round_trip():
    est = MeanFieldPPO(env="formation", iterations=3, hidden=(16,))
    params = est.get_params()
    assert params["env"] == "formation" and params["hidden"] == (16,)
    assert clone(est).get_params() == params
    est.set_params(n_agents=12)
    assert est.n_agents == 12


def test_ppo_estimator_fit_predict():
    est = MeanFieldPPO(n_agents=10, iterations=1, train_batch=100, minibatch=50, epochs=1, hidden=(8,), n_envs=2)
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 36)))
    est.fit()
    assert len(est.curve_) == 1
    out = est.predict(np.full((3, 36), 1 / 36))
    assert out.shape == (3, 144) and np.all(np.abs(out) <= 1)
    rule = est.decision_rule(_obs())
    same = est.decision_rule(np.full(36, 1 / 36))
    np.testing.assert_array_equal(rule.theta, same.theta)
    assert isinstance(rule, MeanFieldAction)
    assert np.all(np.abs(rule.theta) <= 0.2)
    rets = est.evaluate(episodes=2, n_agents=15, seed=1)
    assert rets.shape == (2,)
    np.testing.assert_array_equal(rets, est.evaluate(episodes=2, n_agents=15, seed=1))
    assert np.isfinite(est.score())


def _obs():
    from mfcswarm.envs import Observation

    return Observation(np.full(36, 1 / 36))


def test_marl_estimator_has_no_decision_rule():
    est = MeanFieldPPO(n_agents=3, iterations=1, train_batch=60, minibatch=30, epochs=1, hidden=(8,),
                       n_envs=1, marl=True).fit()
    assert est.params_.obs_dim == 38
    with pytest.raises(ValueError):
        est.decision_rule(_obs())
