"""scikit-learn style wrappers around the histogram encoder and the PPO trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positions
from .envs import EnvConfig, EnvKind
from .meanfield import GridSpec, empirical_histogram
from .policy_nn import forward_policy
from .ppo import MeanFieldActor, PpoConfig, evaluate, train


class HistogramEncoder(TransformerMixin, BaseEstimator):
    """Encode swarms (each an ``(N, 2)`` position array) as bin-mass vectors.

    ``X`` is a 3-d array ``(n_swarms, N, 2)`` or a list of 2-d arrays whose
    swarm sizes may differ. The output has one row per swarm and
    ``bins_per_axis**2`` columns summing to one.
    """

    def __init__(self, bins_per_axis: int = 6, box_half_width: float = 2.0):
        self.bins_per_axis = bins_per_axis
        self.box_half_width = box_half_width

    def _swarms(self, X) -> list[np.ndarray]:
        if isinstance(X, np.ndarray) and X.ndim == 2:
            X = [X]
        swarms = [check_positions(x, self.box_half_width, name="swarm") for x in X]
        if not swarms:
            raise ValueError("X holds no swarms")
        return swarms

    def fit(self, X, y=None):
        self.grid_ = GridSpec(self.bins_per_axis, self.box_half_width)
        self._swarms(X)
        self.n_features_out_ = self.grid_.n_bins
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "grid_")
        return np.stack([empirical_histogram(x, self.grid_) for x in self._swarms(X)])

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "grid_")
        return np.array([f"bin{b}" for b in range(self.n_features_out_)], dtype=object)


class MeanFieldPPO(BaseEstimator):
    """Mean-field (or parameter-shared, ``marl=True``) PPO on one swarm task.

    ``fit`` trains from scratch; ``predict`` maps observation vectors to the
    deterministic squashed network output in ``[-1, 1]``; ``score`` is the
    mean evaluation return.
    """

    def __init__(
        self,
        env: str = "aggregation",
        n_agents: int = 300,
        iterations: int = 100,
        train_batch: int = 4000,
        minibatch: int = 1000,
        epochs: int = 5,
        learning_rate: float = 5e-5,
        hidden: tuple[int, ...] = (256, 256),
        n_envs: int = 8,
        marl: bool = False,
        seed: int = 0,
    ):
        self.env = env
        self.n_agents = n_agents
        self.iterations = iterations
        self.train_batch = train_batch
        self.minibatch = minibatch
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.hidden = hidden
        self.n_envs = n_envs
        self.marl = marl
        self.seed = seed

    def _env_config(self, n_agents: int | None = None) -> EnvConfig:
        return EnvConfig(kind=EnvKind.parse(self.env), n_agents=n_agents or self.n_agents)

    def fit(self, X=None, y=None):
        """Train; ``X`` and ``y`` are ignored since data comes from simulation."""
        cfg = PpoConfig(
            iterations=self.iterations, train_batch=self.train_batch, minibatch=self.minibatch,
            epochs=self.epochs, learning_rate=self.learning_rate, hidden=tuple(self.hidden),
            n_envs=self.n_envs,
        )
        state, rows = train(self._env_config(), cfg, self.seed, marl=self.marl)
        self.state_ = state
        self.params_ = state.params
        self.curve_ = rows
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        mean, _ = forward_policy(self.params_, X)
        return np.clip(mean, -1.0, 1.0)

    def decision_rule(self, obs):
        """Squashed per-bin Gaussian decision rule for one observation.

        ``obs`` is an observation vector or an ``Observation``.
        """
        check_is_fitted(self, "params_")
        if self.marl:
            raise ValueError("decision rules exist only for mean-field policies")
        if hasattr(obs, "vector"):
            obs = obs.vector()
        return MeanFieldActor(self.params_, self._env_config().per_bin_actions)(obs)

    def evaluate(self, episodes: int = 100, n_agents: int | None = None, seed: int = 0) -> np.ndarray:
        check_is_fitted(self, "params_")
        return evaluate(self._env_config(n_agents), self.params_, episodes, seed, marl=self.marl)

    def score(self, X=None, y=None) -> float:
        return float(np.mean(self.evaluate(episodes=10)))
