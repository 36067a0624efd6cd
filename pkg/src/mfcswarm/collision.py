"""Artificial potential field navigation between mean-field decision epochs.

Each epoch the mean-field policy hands every agent a target one step ahead;
agents then fly toward it for ``inner_steps`` explicit Euler substeps while
repelling neighbours closer than ``interaction_radius``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

from ._validation import SeedLike, as_generator
from .envs import EnvConfig, TaskState, observe, step_reward, task_arrivals
from .meanfield import MeanFieldAction, OpenLoopSequence, sample_decision_rule
from .sim_core import SpaceConfig, SwarmState, clip_to_box, clip_to_disc, sample_initial

DISTANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class ApfConfig:
    attract_gain: float = 1.5
    rep_gain_base: float = 1.5
    c_rep: float = 0.1
    interaction_radius: float = 1.0
    inner_dt: float = 0.02
    inner_steps: int = 100
    speed_cap: float | None = None
    init_separation: float = 0.1
    agent_radius: float | None = None

    def __post_init__(self):
        if min(self.attract_gain, self.rep_gain_base, self.c_rep) < 0:
            raise ValueError("gains and c_rep must be non-negative")
        if self.inner_dt <= 0 or self.inner_steps < 1:
            raise ValueError("inner_dt must be > 0 and inner_steps >= 1")

    @property
    def epoch_duration(self) -> float:
        return self.inner_dt * self.inner_steps


def repulsion(d, cfg: ApfConfig) -> np.ndarray:
    """Velocity pushing an agent away from a neighbour at offset ``d = x_i - x_j``.

    1.5 c_rep (1/|d| - 1) d / |d|^3 inside the interaction radius, zero outside.
    """
    d = np.asarray(d, dtype=float)
    r = np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), DISTANCE_FLOOR)
    gain = cfg.rep_gain_base * cfg.c_rep * (1.0 / r - 1.0) / r**3
    return np.where(r <= cfg.interaction_radius, gain * d, 0.0)


def _pair_geometry(positions: np.ndarray):
    dx = positions[:, 0, None] - positions[None, :, 0]
    dy = positions[:, 1, None] - positions[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    np.fill_diagonal(dist, np.inf)
    return dx, dy, dist


def apf_velocities(positions, targets, cfg: ApfConfig) -> tuple[np.ndarray, float, int]:
    """Velocities of all agents from one positions snapshot.

    Returns ``(velocities, min_distance, n_floored)`` where ``n_floored``
    counts unordered pairs closer than the singularity floor.
    """
    x = np.asarray(positions, dtype=float)
    v = cfg.attract_gain * (np.asarray(targets, dtype=float) - x)
    n = x.shape[0]
    if n < 2:
        return _cap(v, cfg), float("inf"), 0
    if cfg.c_rep == 0:
        return _cap(v, cfg), float(pdist(x).min()), 0
    dx, dy, dist = _pair_geometry(x)
    dmin = float(dist.min())
    floored = int(np.count_nonzero(dist < DISTANCE_FLOOR) // 2) if dmin < DISTANCE_FLOOR else 0
    r = np.maximum(dist, DISTANCE_FLOOR)
    gain = cfg.rep_gain_base * cfg.c_rep * (1.0 / r - 1.0) / (r * r * r)
    gain[dist > cfg.interaction_radius] = 0.0
    v[:, 0] += (gain * dx).sum(axis=1)
    v[:, 1] += (gain * dy).sum(axis=1)
    return _cap(v, cfg), dmin, floored


def _cap(v: np.ndarray, cfg: ApfConfig) -> np.ndarray:
    return v if cfg.speed_cap is None else clip_to_disc(v, cfg.speed_cap)


def apf_velocity(i: int, positions, targets, cfg: ApfConfig) -> np.ndarray:
    """Velocity of agent ``i`` alone: attraction plus repulsion from neighbours."""
    x = np.asarray(positions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"agent index {i} out of range")
    v = cfg.attract_gain * (t[i] - x[i])
    if cfg.c_rep > 0:
        others = np.delete(x, i, axis=0)
        v = v + repulsion(x[i] - others, cfg).sum(axis=0)
    if cfg.speed_cap is not None:
        v = clip_to_disc(v, cfg.speed_cap)
    return v


@dataclass
class EpochResult:
    positions: np.ndarray
    min_distance: float
    max_deviation: float
    singularity_count: int


def integrate_epoch(positions, targets, cfg: ApfConfig, space: SpaceConfig) -> EpochResult:
    """``inner_steps`` Jacobi-style Euler substeps with box clipping.

    The reported minimum distance covers every substep configuration,
    including the starting one and the final one.
    """
    x = np.array(positions, dtype=float)
    tgt = np.asarray(targets, dtype=float)
    dmin = np.inf
    floored = 0
    for _ in range(cfg.inner_steps):
        v, d, f = apf_velocities(x, tgt, cfg)
        dmin = min(dmin, d)
        floored += f
        x = clip_to_box(x + cfg.inner_dt * v, space.box_half_width)
    if x.shape[0] > 1:
        dmin = min(dmin, float(pdist(x).min()))
    dev = float(np.linalg.norm(x - tgt, axis=1).max())
    return EpochResult(x, float(dmin), dev, floored)


Decider = Callable[[np.ndarray, int], MeanFieldAction]


def closed_loop(actor) -> Decider:
    return lambda obs, t: actor(obs)


def open_loop(seq: OpenLoopSequence) -> Decider:
    return lambda obs, t: seq.actions[t]


def run_with_collision_avoidance(
    env_cfg: EnvConfig,
    decide: Decider,
    apf: ApfConfig | None,
    seed: SeedLike,
    state: SwarmState | None = None,
) -> dict:
    """One episode where each mean-field step is realized by APF navigation.

    With ``apf=None`` agents jump straight to their targets, which is the
    plain mean-field dynamics on the same random streams.
    """
    rng = as_generator(seed)
    sep = 0.0 if apf is None else apf.init_separation
    if state is None:
        state = sample_initial(env_cfg.n_agents, env_cfg.space, max(sep, env_cfg.min_separation), rng)
    x = state.positions.copy()
    tasks = TaskState()
    space = env_cfg.space
    rewards = []
    dmin = float(pdist(x).min()) if x.shape[0] > 1 else float("inf")
    singular = 0
    max_dev = 0.0
    for t in range(env_cfg.horizon):
        cur = SwarmState(x, t, _checked=True)
        obs = observe(cur, tasks, env_cfg)
        h = decide(obs.vector(), t)
        u = sample_decision_rule(h, x, env_cfg.grid, rng, space.action_radius)
        tasks, r = step_reward(cur, u, tasks, env_cfg, rng)
        rewards.append(r)
        targets = clip_to_box(x + u, space.box_half_width)
        if apf is None:
            x = targets
            if x.shape[0] > 1:
                dmin = min(dmin, float(pdist(x).min()))
        else:
            res = integrate_epoch(x, targets, apf, space)
            x = res.positions
            dmin = min(dmin, res.min_distance)
            singular += res.singularity_count
            max_dev = max(max_dev, res.max_deviation)
        if env_cfg.has_tasks:
            tasks = task_arrivals(tasks, env_cfg, rng)
    return {
        "rewards": np.asarray(rewards),
        "return": float(np.sum(rewards)),
        "min_distance": dmin,
        "singularity_count": singular,
        "max_deviation": max_dev,
    }


SAFETY_COLUMNS = ["episode", "n_agents", "c_rep", "return", "min_distance", "singularity_count"]


def write_safety_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAFETY_COLUMNS)
        for row in rows:
            w.writerow([
                row["episode"], row["n_agents"], repr(float(row["c_rep"])), repr(float(row["return"])),
                repr(float(row["min_distance"])), int(row["singularity_count"]),
            ])
