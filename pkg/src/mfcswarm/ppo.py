"""PPO for the mean-field MDP, plus a parameter-shared multi-agent variant.

Both modes share the rollout, GAE and update code. A trajectory stores
arrays shaped ``(T, B, ...)`` where ``B`` counts parallel streams: one per
environment copy in mean-field mode, one per (environment, agent) pair in
multi-agent mode.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._validation import SeedLike, as_generator, child_seed
from .envs import EnvConfig, SwarmEnv, per_agent_views
from .meanfield import MeanFieldAction
from .policy_nn import (
    AdamState,
    PolicyParams,
    adam_update,
    backward,
    forward_policy,
    forward_value,
    gaussian_kl,
    gaussian_log_prob,
    init_params,
    load_checkpoint,
    sample_action,
    save_checkpoint,
    squash_movement,
    squash_to_mfc,
)

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["iteration", "env_steps", "mean_return", "std_return", "mean_kl", "kl_coeff"]


class TrainingDivergedError(FloatingPointError):
    """A PPO loss or gradient became non-finite."""


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 1.0
    kl_coeff: float = 0.03
    kl_target: float = 0.01
    clip_param: float = 0.2
    learning_rate: float = 5e-5
    train_batch: int = 4000
    minibatch: int = 1000
    epochs: int = 5
    iterations: int = 100
    vf_coeff: float = 1.0
    entropy_coeff: float = 0.0
    grad_clip: float | None = 0.5
    hidden: tuple[int, ...] = (256, 256)
    n_envs: int = 8
    checkpoint_every: int = 10

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.minibatch > self.train_batch:
            raise ValueError("minibatch must not exceed train_batch")
        for name in ("kl_coeff", "clip_param", "train_batch", "minibatch", "epochs", "n_envs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.iterations < 0:
            raise ValueError("learning_rate and iterations must be non-negative")


@dataclass
class Trajectory:
    obs: np.ndarray
    samples: np.ndarray
    log_probs: np.ndarray
    means: np.ndarray
    log_std: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    terminals: np.ndarray
    bootstrap: np.ndarray
    episode_returns: list[float] = field(default_factory=list)
    env_steps: int = 0

    @property
    def n_transitions(self) -> int:
        return self.rewards.size


# ---------------------------------------------------------------- actors


class MeanFieldActor:
    """Maps histogram observations to decision rules through a policy network."""

    def __init__(self, params: PolicyParams, per_bin: bool = True, deterministic: bool = True, seed: SeedLike = 0):
        self.params = params
        self.per_bin = per_bin
        self.deterministic = deterministic
        self._rng = as_generator(seed)

    def raw_action(self, obs: np.ndarray) -> np.ndarray:
        mean, log_std = forward_policy(self.params, obs)
        if self.deterministic:
            return np.clip(mean[0], -1.0, 1.0)
        return sample_action(mean[0], log_std[0], self._rng).action

    def __call__(self, obs: np.ndarray) -> MeanFieldAction:
        return squash_to_mfc(self.raw_action(obs), self.per_bin)


class SharedAgentActor:
    """Parameter-shared per-agent policy acting on per-agent views."""

    def __init__(self, params: PolicyParams, deterministic: bool = True, seed: SeedLike = 0):
        self.params = params
        self.deterministic = deterministic
        self._rng = as_generator(seed)

    def __call__(self, env: SwarmEnv) -> np.ndarray:
        cfg = env.config
        views = per_agent_views(env.observation, env.state.positions, cfg.space.box_half_width)
        mean, log_std = forward_policy(self.params, views)
        raw = np.clip(mean, -1, 1) if self.deterministic else sample_action(mean, log_std, self._rng).action
        return squash_movement(raw, cfg.space.action_radius)


def policy_shape(env_cfg: EnvConfig, marl: bool = False) -> tuple[int, int]:
    if marl:
        return env_cfg.obs_dim + 2, 2
    return env_cfg.obs_dim, env_cfg.action_dim


# ---------------------------------------------------------------- rollouts


def collect_rollout(
    env_cfg: EnvConfig,
    params: PolicyParams,
    steps: int,
    seed: SeedLike,
    n_envs: int = 1,
    marl: bool = False,
) -> Trajectory:
    """Gather ``steps`` environment steps split evenly over ``n_envs`` copies.

    Episodes run back to back, resetting at the horizon. The last, possibly
    partial, episode of each copy is marked done and bootstrapped from the
    value network.
    """
    if steps % n_envs:
        raise ValueError(f"steps={steps} is not divisible by n_envs={n_envs}")
    per_env = steps // n_envs
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    env_seeds = ss.spawn(n_envs + 1)
    act_rng = as_generator(env_seeds[-1])
    env_rngs = [as_generator(s) for s in env_seeds[:-1]]
    envs = [SwarmEnv(env_cfg) for _ in range(n_envs)]
    obs = [env.reset(rng) for env, rng in zip(envs, env_rngs)]
    n_agents = env_cfg.n_agents if marl else 1
    B = n_envs * n_agents
    obs_dim, act_dim = params.obs_dim, params.action_dim

    buf_obs = np.empty((per_env, B, obs_dim))
    buf_samples = np.empty((per_env, B, act_dim))
    buf_means = np.empty((per_env, B, act_dim))
    buf_logp = np.empty((per_env, B))
    buf_rew = np.empty((per_env, B))
    buf_val = np.empty((per_env, B))
    dones = np.zeros((per_env, B), bool)
    bootstrap = np.zeros((per_env, B))
    returns, running = [], np.zeros(n_envs)

    def views():
        if not marl:
            return np.stack(obs)
        return np.concatenate(
            [per_agent_views(e.observation, e.state.positions, env_cfg.space.box_half_width) for e in envs]
        )

    x = views()
    for t in range(per_env):
        mean, log_std = forward_policy(params, x)
        draw = sample_action(mean, log_std, act_rng)
        buf_obs[t], buf_samples[t], buf_means[t], buf_logp[t] = x, draw.sample, mean, draw.log_prob
        buf_val[t] = forward_value(params, x)
        ended = []
        for k, env in enumerate(envs):
            if marl:
                u = squash_movement(draw.action[k * n_agents:(k + 1) * n_agents], env_cfg.space.action_radius)
                o, r, done, _ = env.step_agents(u)
            else:
                o, r, done, _ = env.step(squash_to_mfc(draw.action[k], env_cfg.per_bin_actions))
            buf_rew[t, k * n_agents:(k + 1) * n_agents] = r
            running[k] += r
            if done or t == per_env - 1:
                dones[t, k * n_agents:(k + 1) * n_agents] = True
                ended.append(k)
                if done:
                    returns.append(float(running[k]))
                running[k] = 0.0
            obs[k] = o
        x = views()
        if ended:
            rows = np.concatenate([np.arange(k * n_agents, (k + 1) * n_agents) for k in ended])
            bootstrap[t, rows] = forward_value(params, x[rows])
            for k in ended:
                if envs[k].t >= env_cfg.horizon and t < per_env - 1:
                    obs[k] = envs[k].reset(env_rngs[k])
            x = views()

    return Trajectory(
        obs=buf_obs,
        samples=buf_samples,
        log_probs=buf_logp,
        means=buf_means,
        log_std=np.asarray(forward_policy(params, x[:1])[1][0]).copy(),
        rewards=buf_rew,
        values=buf_val,
        dones=dones,
        terminals=np.zeros_like(dones),
        bootstrap=bootstrap,
        episode_returns=returns,
        env_steps=steps,
    )


def compute_gae(
    rewards,
    values,
    dones,
    bootstrap=None,
    gamma: float = 0.99,
    lam: float = 1.0,
    terminals=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets along axis 0.

    ``dones[t]`` marks the last step of an episode segment. Truncated segments
    bootstrap from ``bootstrap[t]``; ``terminals[t]`` forces a zero tail.
    Returned advantages are *not* normalized.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("empty trajectory")
    squeeze = r.ndim == 1
    r = np.atleast_2d(r.T).T if squeeze else r
    v = np.asarray(values, dtype=float).reshape(r.shape)
    d = np.asarray(dones, dtype=bool).reshape(r.shape)
    boot = np.zeros_like(r) if bootstrap is None else np.asarray(bootstrap, dtype=float).reshape(r.shape)
    term = np.zeros_like(d) if terminals is None else np.asarray(terminals, dtype=bool).reshape(r.shape)
    T = r.shape[0]
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for t in reversed(range(T)):
        if t == T - 1:
            nxt = boot[t]
        else:
            nxt = np.where(d[t], boot[t], v[t + 1])
        nxt = np.where(term[t], 0.0, nxt)
        delta = r[t] + gamma * nxt - v[t]
        carry = np.where(d[t] | (t == T - 1), 0.0, last)
        last = delta + gamma * lam * carry
        adv[t] = last
    targets = adv + v
    if squeeze:
        return adv[:, 0], targets[:, 0]
    return adv, targets


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-8 else 1.0)


# ---------------------------------------------------------------- update


@dataclass
class TrainState:
    params: PolicyParams
    optimizer: AdamState
    iteration: int = 0
    env_steps: int = 0
    kl_coeff: float = 0.03
    seed: int = 0
    return_history: list[float] = field(default_factory=list)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "kl_coeff": self.kl_coeff,
            "seed": self.seed,
            "return_history": self.return_history,
        }
        meta.update(extra or {})
        save_checkpoint(path, self.params, self.optimizer, meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        ck = load_checkpoint(path)
        m = ck.metadata
        opt = ck.optimizer if ck.optimizer is not None else AdamState.zeros_like(ck.params)
        return cls(
            ck.params, opt, int(m.get("iteration", 0)), int(m.get("env_steps", 0)),
            float(m.get("kl_coeff", 0.03)), int(m.get("seed", 0)), list(m.get("return_history", [])),
        )


@dataclass
class LossParts:
    total: float
    policy: float
    kl: float
    value: float
    entropy: float
    clip_fraction: float


def ppo_loss_and_grads(
    params: PolicyParams,
    obs,
    samples,
    old_log_probs,
    old_means,
    old_log_std,
    advantages,
    value_targets,
    kl_coeff: float,
    clip_param: float,
    vf_coeff: float = 1.0,
    entropy_coeff: float = 0.0,
) -> tuple[LossParts, dict[str, np.ndarray]]:
    """Clipped surrogate + KL(old || new) penalty + squared value error.

    Returns the scalar loss (to minimize) and its exact gradient.
    """
    n = obs.shape[0]
    mean, log_std, cache = forward_policy(params, obs, return_cache=True)
    values, vacts = forward_value(params, obs, return_cache=True)
    var = np.exp(2 * log_std)
    logp = gaussian_log_prob(samples, mean, log_std)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1 - clip_param, 1 + clip_param)
    s1, s2 = ratio * advantages, clipped * advantages
    surrogate = np.minimum(s1, s2)
    kl = gaussian_kl(old_means, old_log_std, mean, log_std)
    verr = values - value_targets
    entropy = np.sum(log_std + 0.5 * math.log(2 * math.pi * math.e), axis=-1)

    policy_loss = -surrogate.mean()
    kl_loss = kl.mean()
    value_loss = np.mean(verr * verr)
    total = policy_loss + kl_coeff * kl_loss + vf_coeff * value_loss - entropy_coeff * entropy.mean()

    # surrogate: gradient flows only through the unclipped branch when it is the minimum
    d_logp = np.where(s1 <= s2, -advantages * ratio, 0.0) / n
    diff = samples - mean
    d_mean = d_logp[:, None] * diff / var
    d_log_std = d_logp[:, None] * (diff * diff / var - 1.0)
    old_var = np.exp(2 * old_log_std)
    d_mean = d_mean + kl_coeff * (mean - old_means) / var / n
    d_log_std = d_log_std + kl_coeff * (1.0 - (old_var + (old_means - mean) ** 2) / var) / n
    d_log_std = d_log_std - entropy_coeff / n
    d_value = 2.0 * vf_coeff * verr / n
    grads = backward(params, cache, d_mean, d_log_std, vacts, d_value)

    parts = LossParts(
        float(total), float(policy_loss), float(kl_loss), float(value_loss),
        float(entropy.mean()), float(np.mean(np.abs(ratio - 1) > clip_param)),
    )
    return parts, grads


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    out = dict(grads)
    for prefix in ("pi.", "vf."):
        keys = [k for k in grads if k.startswith(prefix)]
        norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys))
        if norm > max_norm:
            for k in keys:
                out[k] = grads[k] * (max_norm / norm)
    return out


def ppo_update(state: TrainState, traj: Trajectory, cfg: PpoConfig, seed: SeedLike) -> tuple[TrainState, dict]:
    """Several epochs of minibatch PPO on one batch, then adapt the KL coefficient."""
    rng = as_generator(seed)
    adv, targets = compute_gae(
        traj.rewards, traj.values, traj.dones, traj.bootstrap, cfg.gamma, cfg.gae_lambda, traj.terminals
    )
    n = traj.rewards.size
    obs = traj.obs.reshape(n, -1)
    samples = traj.samples.reshape(n, -1)
    means = traj.means.reshape(n, -1)
    old_logp = traj.log_probs.reshape(n)
    adv = normalize_advantages(adv.reshape(n))
    targets = targets.reshape(n)
    old_log_std = np.broadcast_to(traj.log_std, means.shape)

    params, opt = state.params, state.optimizer
    mb = min(cfg.minibatch, n)
    last = None
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = perm[start:start + mb]
            parts, grads = ppo_loss_and_grads(
                params, obs[idx], samples[idx], old_logp[idx], means[idx], old_log_std[idx],
                adv[idx], targets[idx], state.kl_coeff, cfg.clip_param, cfg.vf_coeff, cfg.entropy_coeff,
            )
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if not math.isfinite(parts.total) or bad:
                raise TrainingDivergedError(
                    f"non-finite PPO step at iteration {state.iteration}: loss={parts}, bad grads={bad}"
                )
            params, opt = adam_update(params, _clip_grads(grads, cfg.grad_clip), opt, cfg.learning_rate)
            last = parts

    new_mean, new_log_std = forward_policy(params, obs)
    mean_kl = float(np.mean(gaussian_kl(means, old_log_std, new_mean, new_log_std)))
    kl_coeff = state.kl_coeff
    if mean_kl > 2.0 * cfg.kl_target:
        kl_coeff *= 2.0
    elif mean_kl < 0.5 * cfg.kl_target:
        kl_coeff *= 0.5
    new_state = TrainState(
        params, opt, state.iteration + 1, state.env_steps + traj.env_steps, kl_coeff, state.seed,
        list(state.return_history),
    )
    stats = {"mean_kl": mean_kl, "kl_coeff": kl_coeff, "last_loss": asdict(last) if last else None}
    return new_state, stats


# ---------------------------------------------------------------- training loops


def initial_state(env_cfg: EnvConfig, cfg: PpoConfig, seed: int, marl: bool = False) -> TrainState:
    obs_dim, act_dim = policy_shape(env_cfg, marl)
    params = init_params(obs_dim, act_dim, cfg.hidden, child_seed(seed, 0))
    return TrainState(params, AdamState.zeros_like(params), 0, 0, cfg.kl_coeff, int(seed))


def train_iteration(state: TrainState, env_cfg: EnvConfig, cfg: PpoConfig, marl: bool = False) -> tuple[TrainState, dict]:
    it = state.iteration
    n_envs = cfg.n_envs
    traj = collect_rollout(env_cfg, state.params, cfg.train_batch, child_seed(state.seed, 1, it), n_envs, marl)
    rets = traj.episode_returns
    new_state, stats = ppo_update(state, traj, cfg, child_seed(state.seed, 2, it))
    mean_ret = float(np.mean(rets)) if rets else float("nan")
    new_state.return_history.append(mean_ret)
    row = {
        "iteration": it,
        "env_steps": new_state.env_steps,
        "mean_return": mean_ret,
        "std_return": float(np.std(rets)) if rets else float("nan"),
        "mean_kl": stats["mean_kl"],
        "kl_coeff": stats["kl_coeff"],
    }
    return new_state, row


def write_curve(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in rows:
            w.writerow([row["iteration"], row["env_steps"]] + [repr(float(row[c])) for c in CURVE_COLUMNS[2:]])


def train(
    env_cfg: EnvConfig,
    cfg: PpoConfig,
    seed: int,
    *,
    marl: bool = False,
    out_dir=None,
    state: TrainState | None = None,
    on_iteration: Callable[[dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Alternate rollouts and updates for ``cfg.iterations`` iterations.

    When ``out_dir`` is given, ``curve.csv`` is rewritten after every
    iteration and ``checkpoint.npz`` every ``cfg.checkpoint_every``
    iterations and at the end.
    """
    state = state or initial_state(env_cfg, cfg, seed, marl)
    rows: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    meta = {"env": env_cfg.kind.value, "marl": marl, "per_bin": env_cfg.per_bin_actions}
    for _ in range(cfg.iterations):
        state, row = train_iteration(state, env_cfg, cfg, marl)
        rows.append(row)
        log.info("iter %d return %.4f kl %.5f beta %.4g", row["iteration"], row["mean_return"], row["mean_kl"], row["kl_coeff"])
        if on_iteration is not None:
            on_iteration(row)
        if out is not None:
            write_curve(out / "curve.csv", rows)
            if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                state.save(out / "checkpoint.npz", meta)
    if out is not None:
        write_curve(out / "curve.csv", rows)
        state.save(out / "checkpoint.npz", meta)
    return state, rows


def train_marl(env_cfg: EnvConfig, cfg: PpoConfig, seed: int, **kw) -> tuple[TrainState, list[dict]]:
    """Parameter-shared independent PPO: every agent gets the global reward."""
    return train(env_cfg, cfg, seed, marl=True, **kw)


# ---------------------------------------------------------------- evaluation


def run_episode(env_cfg: EnvConfig, actor, seed: SeedLike, marl: bool = False, state=None) -> dict:
    env = SwarmEnv(env_cfg)
    obs = env.reset(seed, state=state)
    rewards = []
    done = False
    while not done:
        if marl:
            obs, r, done, _ = env.step_agents(actor(env))
        else:
            obs, r, done, _ = env.step(actor(obs))
        rewards.append(r)
    return {"rewards": np.asarray(rewards), "return": float(np.sum(rewards))}


def evaluate(
    env_cfg: EnvConfig,
    params: PolicyParams,
    episodes: int,
    seed: int,
    *,
    deterministic: bool = True,
    marl: bool = False,
) -> np.ndarray:
    """Undiscounted returns of ``episodes`` independent episodes.

    Episode ``k`` always uses stream ``(seed, k)``, so results do not depend
    on evaluation order.
    """
    out = np.empty(episodes)
    for k in range(episodes):
        ss = child_seed(seed, k)
        env_ss, act_ss = ss.spawn(2)
        if marl:
            actor = SharedAgentActor(params, deterministic, act_ss)
        else:
            actor = MeanFieldActor(params, env_cfg.per_bin_actions, deterministic, act_ss)
        out[k] = run_episode(env_cfg, actor, env_ss, marl)["return"]
    return out
