"""Histogram discretization, per-bin Gaussian decision rules and open-loop sequences.

The mean field is never propagated exactly. A particle ensemble stands in for
it: a finite swarm whose empirical histogram tracks the limiting measure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._validation import SeedLike, as_generator, check_positions
from .sim_core import SpaceConfig, SwarmState, clip_to_disc, step_swarm

OPEN_LOOP_FORMAT = "mfcswarm.open_loop"
OPEN_LOOP_VERSION = 1

THETA_BOUND = 0.2
SIGMA_MAX = 0.25
SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class GridSpec:
    bins_per_axis: int = 6
    box_half_width: float = 2.0

    def __post_init__(self):
        if self.bins_per_axis < 1:
            raise ValueError("bins_per_axis must be >= 1")
        if self.box_half_width <= 0:
            raise ValueError("box_half_width must be > 0")

    @property
    def n_bins(self) -> int:
        return self.bins_per_axis**2

    @property
    def bin_width(self) -> float:
        return 2.0 * self.box_half_width / self.bins_per_axis

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(-self.box_half_width, self.box_half_width, self.bins_per_axis + 1)

    def centers(self) -> np.ndarray:
        """Bin centres in row-major order, shape (M, 2) as (x, y)."""
        mid = self.edges[:-1] + 0.5 * self.bin_width
        yy, xx = np.meshgrid(mid, mid, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])


def bin_index(x, grid: GridSpec):
    """Row-major cell index (row from y, column from x).

    Cells are half-open ``[lo, hi)`` except the last one along each axis,
    which is closed so the box boundary belongs to it. Accepts a single point
    (returns an int) or an (n, 2) array (returns an int array).
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = check_positions(pts, grid.box_half_width, name="x")
    k = grid.bins_per_axis
    cells = np.floor((pts + grid.box_half_width) / grid.bin_width).astype(np.int64)
    # floor of exact edge multiples can undershoot by one ulp; compare to the edges directly
    edges = grid.edges
    cells = np.clip(cells, 0, k - 1)
    below = pts < edges[cells]
    cells[below] -= 1
    above = (cells < k - 1) & (pts >= edges[np.minimum(cells + 1, k)])
    cells[above] += 1
    idx = cells[:, 1] * k + cells[:, 0]
    return int(idx[0]) if single else idx


def empirical_histogram(positions, grid: GridSpec) -> np.ndarray:
    pos = positions.positions if isinstance(positions, SwarmState) else positions
    pos = np.asarray(pos, dtype=float)
    if pos.ndim != 2 or pos.shape[0] == 0:
        raise ValueError("empirical histogram of an empty swarm is undefined")
    counts = np.bincount(bin_index(pos, grid), minlength=grid.n_bins)
    return counts / pos.shape[0]


@dataclass
class MeanFieldAction:
    """Per-bin Gaussian decision rule.

    ``theta`` and ``sigma`` have shape (M, 2), or (1, 2) for the single global
    Gaussian variant, which is broadcast over all bins.
    """

    theta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if self.theta.shape != self.sigma.shape or self.theta.shape[1] != 2:
            raise ValueError("theta and sigma must both have shape (M, 2)")
        if np.any(np.abs(self.theta) > THETA_BOUND + 1e-12):
            raise ValueError("theta components must lie in [-0.2, 0.2]")
        if np.any(self.sigma <= 0) or np.any(self.sigma > SIGMA_MAX + 1e-12):
            raise ValueError("sigma components must lie in (0, 0.25]")

    @property
    def is_global(self) -> bool:
        return self.theta.shape[0] == 1

    def per_bin(self, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
        if self.is_global:
            reps = (grid.n_bins, 1)
            return np.tile(self.theta, reps), np.tile(self.sigma, reps)
        if self.theta.shape[0] != grid.n_bins:
            raise ValueError(f"action has {self.theta.shape[0]} bins, grid has {grid.n_bins}")
        return self.theta, self.sigma

    def to_array(self) -> np.ndarray:
        """(M, 4) array with columns theta_x, theta_y, sigma_1, sigma_2."""
        return np.hstack([self.theta, self.sigma])

    @classmethod
    def from_array(cls, arr) -> "MeanFieldAction":
        arr = np.asarray(arr, dtype=float).reshape(-1, 4)
        return cls(arr[:, :2], arr[:, 2:])


def sample_decision_rule(
    h: MeanFieldAction,
    x,
    grid: GridSpec,
    seed: SeedLike,
    action_radius: float = THETA_BOUND,
) -> np.ndarray:
    """Draw u ~ N(theta_b, diag(sigma_b^2)) for the bin b of each position, then disc-clip."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    rng = as_generator(seed)
    theta, sigma = h.per_bin(grid)
    b = bin_index(pts, grid)
    u = theta[b] + sigma[b] * rng.standard_normal(size=pts.shape)
    u = clip_to_disc(u, action_radius)
    return u[0] if single else u


def mf_transition(
    particles: SwarmState,
    h: MeanFieldAction,
    space: SpaceConfig,
    grid: GridSpec,
    seed: SeedLike,
) -> SwarmState:
    """One step of the particle approximation of the mean-field transition."""
    rng = as_generator(seed)
    u = sample_decision_rule(h, particles.positions, grid, rng, space.action_radius)
    return step_swarm(particles, u, space, rng)


@dataclass
class OpenLoopSequence:
    actions: list[MeanFieldAction]
    initial_histogram: np.ndarray
    grid: GridSpec = field(default_factory=GridSpec)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.actions:
            raise ValueError("an open-loop sequence needs at least one action")
        self.initial_histogram = np.asarray(self.initial_histogram, dtype=float)

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def to_dict(self) -> dict:
        return {
            "format": OPEN_LOOP_FORMAT,
            "version": OPEN_LOOP_VERSION,
            "grid": {
                "bins_per_axis": self.grid.bins_per_axis,
                "box_half_width": self.grid.box_half_width,
            },
            "horizon": self.horizon,
            "columns": ["theta_x", "theta_y", "sigma_1", "sigma_2"],
            "actions": [h.to_array().tolist() for h in self.actions],
            "initial_histogram": self.initial_histogram.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OpenLoopSequence":
        if doc.get("format") != OPEN_LOOP_FORMAT:
            raise ValueError("not an open-loop sequence document")
        if doc.get("version") != OPEN_LOOP_VERSION:
            raise ValueError(f"unsupported open-loop version {doc.get('version')}")
        seq = cls(
            actions=[MeanFieldAction.from_array(a) for a in doc["actions"]],
            initial_histogram=np.asarray(doc["initial_histogram"], dtype=float),
            grid=GridSpec(**doc["grid"]),
            metadata=dict(doc.get("metadata", {})),
        )
        if seq.horizon != doc["horizon"]:
            raise ValueError("horizon field disagrees with the number of actions")
        return seq

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "OpenLoopSequence":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def record_open_loop(
    env,
    decide: Callable[[np.ndarray], MeanFieldAction],
    seed: SeedLike,
) -> OpenLoopSequence:
    """Record h_0..h_{H-1} from one closed-loop rollout of ``env``.

    ``env`` is any environment exposing ``reset(seed)`` and ``step(h)`` (see
    :class:`mfcswarm.envs.SwarmEnv`); ``decide`` maps an observation vector
    to a decision rule. For the recorded sequence ``env`` should simulate the
    particle ensemble, i.e. a large swarm standing in for the mean field.
    """
    rng = as_generator(seed)
    obs = env.reset(rng)
    first = env.observation.state_hist.copy()
    actions = []
    done = False
    while not done:
        h = decide(obs)
        actions.append(h)
        obs, _, done, _ = env.step(h)
    return OpenLoopSequence(actions, first, env.config.grid)


def replay_open_loop(seq: OpenLoopSequence, env, seed: SeedLike, state: SwarmState | None = None) -> dict:
    """Run ``env`` forward using only the recorded decision rules.

    Agents act on their own position alone: the histogram observation is
    never consulted. Returns per-step rewards and positions.
    """
    horizon = env.config.horizon
    if horizon > seq.horizon:
        raise ValueError(f"episode horizon {horizon} exceeds sequence length {seq.horizon}")
    rng = as_generator(seed)
    env.reset(rng, state=state)
    rewards, states = [], [env.state.positions.copy()]
    for t in range(horizon):
        _, r, _, _ = env.step(seq.actions[t])
        rewards.append(r)
        states.append(env.state.positions.copy())
    return {"rewards": np.asarray(rewards), "states": states, "return": float(np.sum(rewards))}
