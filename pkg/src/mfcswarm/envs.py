"""Aggregation, Formation and Task Allocation as mean-field control MDPs.

The pure functions (:func:`reset`, :func:`env_step` and the reward helpers)
carry the semantics. :class:`SwarmEnv` wraps them in a small stateful object
for rollouts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from ._validation import SeedLike, as_generator
from .meanfield import GridSpec, MeanFieldAction, bin_index, empirical_histogram, sample_decision_rule
from .sim_core import SpaceConfig, SwarmState, min_pairwise_distance, sample_initial, step_swarm
from .transport import FORMATION_TARGET, MixtureSpec, PointCloud, sample_gaussian_mixture, wasserstein1


class EnvKind(str, Enum):
    AGGREGATION = "aggregation"
    FORMATION = "formation"
    TASK_ALLOCATION = "taskalloc"

    @classmethod
    def parse(cls, value) -> "EnvKind":
        if isinstance(value, cls):
            return value
        aliases = {"task_allocation": "taskalloc", "taskallocation": "taskalloc"}
        key = str(value).strip().lower()
        return cls(aliases.get(key, key))


DEFAULT_HORIZON = {
    EnvKind.AGGREGATION: 50,
    EnvKind.FORMATION: 100,
    EnvKind.TASK_ALLOCATION: 200,
}


@dataclass(frozen=True)
class EnvConfig:
    kind: EnvKind = EnvKind.AGGREGATION
    horizon: int | None = None
    n_agents: int = 300
    space: SpaceConfig = field(default_factory=SpaceConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    move_cost: float = 0.3
    task_arrival_rate: float = 0.4
    max_tasks: int = 5
    initial_task_length: float = 10.0
    task_radius: float = 0.5
    formation_target: MixtureSpec = FORMATION_TARGET
    target_samples: int = 300
    min_separation: float = 0.0
    per_bin_actions: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", EnvKind.parse(self.kind))
        if self.horizon is None:
            object.__setattr__(self, "horizon", DEFAULT_HORIZON[self.kind])
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.move_cost < 0 or self.task_arrival_rate < 0:
            raise ValueError("rates and costs must be non-negative")
        if self.max_tasks < 1:
            raise ValueError("max_tasks must be >= 1")
        if self.grid.box_half_width != self.space.box_half_width:
            raise ValueError("grid and space disagree on the box")

    @property
    def has_tasks(self) -> bool:
        return self.kind is EnvKind.TASK_ALLOCATION

    @property
    def obs_dim(self) -> int:
        return self.grid.n_bins * (2 if self.has_tasks else 1)

    @property
    def action_dim(self) -> int:
        return 4 * (self.grid.n_bins if self.per_bin_actions else 1)

    def with_agents(self, n: int) -> "EnvConfig":
        return replace(self, n_agents=int(n))


@dataclass
class TaskState:
    locations: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    remaining: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        self.remaining = np.asarray(self.remaining, dtype=float).ravel()
        if self.locations.shape[0] != self.remaining.shape[0]:
            raise ValueError("task locations and lengths differ in count")

    def __len__(self) -> int:
        return self.remaining.shape[0]


@dataclass
class Observation:
    state_hist: np.ndarray
    task_hist: np.ndarray | None = None

    def vector(self) -> np.ndarray:
        if self.task_hist is None:
            return self.state_hist
        return np.concatenate([self.state_hist, self.task_hist])


def observe(state: SwarmState, tasks: TaskState, cfg: EnvConfig) -> Observation:
    hist = empirical_histogram(state.positions, cfg.grid)
    if not cfg.has_tasks:
        return Observation(hist)
    task_hist = np.zeros(cfg.grid.n_bins)
    if len(tasks):
        task_hist = np.bincount(
            bin_index(tasks.locations, cfg.grid), minlength=cfg.grid.n_bins
        ).astype(float)
    return Observation(hist, task_hist / cfg.max_tasks)


def aggregation_reward(positions, actions, move_cost: float = 0.3) -> float:
    """-mean ||x_i - centroid|| - move_cost * mean ||u_i||."""
    x = np.asarray(positions, dtype=float)
    u = np.asarray(actions, dtype=float)
    spread = np.linalg.norm(x - x.mean(axis=0), axis=1).mean()
    effort = np.linalg.norm(u, axis=1).mean()
    return float(-spread - move_cost * effort)


def formation_reward(positions, cfg: EnvConfig, seed: SeedLike) -> float:
    """Negative W1 between the agents and fresh samples of the target mixture."""
    target = sample_gaussian_mixture(
        cfg.formation_target, cfg.target_samples, seed, cfg.space.box_half_width
    )
    return -wasserstein1(PointCloud.uniform(positions), target)


def task_progress(positions, tasks: TaskState, radius: float = 0.5) -> np.ndarray:
    """Processed length per task: min(1, mean over agents of (1 - 2 d) 1{d <= radius})."""
    if not len(tasks):
        return np.zeros(0)
    x = np.asarray(positions, dtype=float)
    d = np.linalg.norm(x[None, :, :] - tasks.locations[:, None, :], axis=2)
    contrib = np.where(d <= radius, 1.0 - 2.0 * d, 0.0)
    return np.minimum(1.0, contrib.mean(axis=1))


def task_process(positions, tasks: TaskState, radius: float = 0.5) -> tuple[TaskState, float]:
    delta = task_progress(positions, tasks, radius)
    remaining = tasks.remaining - delta
    keep = remaining > 0
    return TaskState(tasks.locations[keep], remaining[keep]), float(delta.sum())


def task_arrivals(tasks: TaskState, cfg: EnvConfig, seed: SeedLike) -> TaskState:
    rng = as_generator(seed)
    k = int(rng.poisson(cfg.task_arrival_rate)) if cfg.task_arrival_rate > 0 else 0
    k = min(k, cfg.max_tasks - len(tasks))
    if k <= 0:
        return tasks
    m = cfg.space.box_half_width
    locs = rng.uniform(-m, m, size=(k, 2))
    return TaskState(
        np.vstack([tasks.locations, locs]),
        np.concatenate([tasks.remaining, np.full(k, cfg.initial_task_length)]),
    )


def per_agent_view(obs: Observation, positions, i: int, box_half_width: float = 2.0) -> np.ndarray:
    x = np.asarray(positions, dtype=float)
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"agent index {i} out of range for {x.shape[0]} agents")
    return np.concatenate([obs.vector(), x[i] / box_half_width])


def per_agent_views(obs: Observation, positions, box_half_width: float = 2.0) -> np.ndarray:
    """All agents' views at once, shape (N, obs_dim + 2)."""
    x = np.asarray(positions, dtype=float)
    shared = np.broadcast_to(obs.vector(), (x.shape[0], obs.vector().shape[0]))
    return np.hstack([shared, x / box_half_width])


def reset(cfg: EnvConfig, seed: SeedLike) -> tuple[SwarmState, TaskState, Observation]:
    state = sample_initial(cfg.n_agents, cfg.space, cfg.min_separation, seed)
    tasks = TaskState()
    return state, tasks, observe(state, tasks, cfg)


def step_reward(state: SwarmState, actions: np.ndarray, tasks: TaskState, cfg: EnvConfig, rng) -> tuple[TaskState, float]:
    """Reward of the current state (and sampled actions) plus task bookkeeping."""
    if cfg.kind is EnvKind.AGGREGATION:
        return tasks, aggregation_reward(state.positions, actions, cfg.move_cost)
    if cfg.kind is EnvKind.FORMATION:
        return tasks, formation_reward(state.positions, cfg, rng)
    return task_process(state.positions, tasks, cfg.task_radius)


def env_step(
    state: SwarmState,
    tasks: TaskState,
    h: MeanFieldAction,
    cfg: EnvConfig,
    seed: SeedLike,
) -> tuple[SwarmState, TaskState, Observation, float]:
    """Sample actions from ``h``, score (state, actions), move, then add tasks."""
    rng = as_generator(seed)
    actions = sample_decision_rule(h, state.positions, cfg.grid, rng, cfg.space.action_radius)
    return apply_actions(state, tasks, actions, cfg, rng)


def apply_actions(state, tasks, actions, cfg: EnvConfig, seed: SeedLike):
    """Same as :func:`env_step` but with explicit per-agent actions (MARL view)."""
    rng = as_generator(seed)
    tasks, reward = step_reward(state, actions, tasks, cfg, rng)
    nxt = step_swarm(state, actions, cfg.space, rng)
    if cfg.has_tasks:
        tasks = task_arrivals(tasks, cfg, rng)
    return nxt, tasks, observe(nxt, tasks, cfg), reward


def reward_bound(cfg: EnvConfig) -> float:
    """Upper bound on |r| for a single step."""
    if cfg.kind is EnvKind.AGGREGATION:
        return 2 * np.sqrt(2) * cfg.space.box_half_width + cfg.move_cost * cfg.space.action_radius
    if cfg.kind is EnvKind.FORMATION:
        return 2 * np.sqrt(2) * cfg.space.box_half_width
    return float(cfg.max_tasks)


class SwarmEnv:
    """Stateful episode runner over the pure step functions.

    ``step`` takes a :class:`MeanFieldAction` and returns
    ``(obs_vector, reward, done, info)``; ``step_agents`` does the same with
    explicit per-agent movement vectors.
    """

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: SwarmState | None = None
        self.tasks = TaskState()
        self.observation: Observation | None = None
        self._rng: np.random.Generator | None = None

    def reset(self, seed: SeedLike, state: SwarmState | None = None) -> np.ndarray:
        self._rng = as_generator(seed)
        if state is None:
            self.state, self.tasks, self.observation = reset(self.config, self._rng)
        else:
            if state.n_agents != self.config.n_agents:
                raise ValueError("provided state does not match n_agents")
            self.state, self.tasks = state.copy(), TaskState()
            self.observation = observe(self.state, self.tasks, self.config)
        return self.observation.vector()

    @property
    def t(self) -> int:
        return self.state.time_index

    def step(self, h: MeanFieldAction):
        acts = sample_decision_rule(
            h, self.state.positions, self.config.grid, self._rng, self.config.space.action_radius
        )
        return self.step_agents(acts)

    def step_agents(self, actions):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        n_tasks = len(self.tasks)
        self.state, self.tasks, self.observation, r = apply_actions(
            self.state, self.tasks, actions, self.config, self._rng
        )
        done = self.state.time_index >= self.config.horizon
        return self.observation.vector(), r, done, {"tasks_before": n_tasks}


TRACE_COLUMNS = ["time", "reward", "min_distance", "task_count"]


def write_trace_csv(path, rewards, states, task_counts=None, histograms=None) -> None:
    """Episode trace: one row per step, optional per-bin histogram columns."""
    n_bins = 0 if histograms is None else len(histograms[0])
    header = TRACE_COLUMNS + [f"bin_{b}" for b in range(n_bins)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, r in enumerate(rewards):
            pos = states[t]
            dmin = min_pairwise_distance(pos) if len(pos) > 1 else float("nan")
            row = [t, repr(float(r)), repr(dmin), 0 if task_counts is None else int(task_counts[t])]
            if histograms is not None:
                row += [repr(float(v)) for v in histograms[t]]
            w.writerow(row)
