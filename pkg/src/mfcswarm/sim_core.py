"""Finite N-agent kinematics on the square box ``[-m, m]^2``."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from ._validation import SeedLike, as_generator, check_positions, check_positive


class InfeasibleSeparationError(RuntimeError):
    """Raised when no initial configuration meets the separation constraint."""


@dataclass(frozen=True)
class SpaceConfig:
    box_half_width: float = 2.0
    action_radius: float = 0.2
    noise_std: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        check_positive(self.box_half_width, "box_half_width")
        check_positive(self.action_radius, "action_radius")
        if len(self.noise_std) != 2 or min(self.noise_std) < 0:
            raise ValueError(f"noise_std must be two non-negative reals, got {self.noise_std}")

    @property
    def noiseless(self) -> bool:
        return self.noise_std[0] == 0 and self.noise_std[1] == 0


@dataclass
class SwarmState:
    positions: np.ndarray
    time_index: int = 0
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        if not self._checked:
            self.positions = check_positions(self.positions)
        if self.positions.shape[0] < 1:
            raise ValueError("a swarm needs at least one agent")

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "SwarmState":
        return SwarmState(self.positions.copy(), self.time_index, _checked=True)


def clip_to_disc(u, radius: float) -> np.ndarray:
    """Project vectors (one per row, or a single 2-vector) onto the disc of ``radius``."""
    u = np.asarray(u, dtype=float)
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    scale = np.minimum(1.0, radius / np.maximum(norms, np.finfo(float).tiny))
    return u * scale


def clip_to_box(x, half_width: float) -> np.ndarray:
    return np.clip(x, -half_width, half_width)


def min_pairwise_distance(positions) -> float:
    pos = np.asarray(positions.positions if isinstance(positions, SwarmState) else positions, dtype=float)
    if pos.shape[0] < 2:
        raise ValueError("minimum pairwise distance needs at least two agents")
    if pos.shape[0] <= 2000:
        return float(pdist(pos).min())
    dist, _ = cKDTree(pos).query(pos, k=2)
    return float(dist[:, 1].min())


def sample_initial(
    n: int,
    space: SpaceConfig,
    min_separation: float = 0.0,
    seed: SeedLike = 0,
    max_rounds: int = 10_000,
) -> SwarmState:
    """Uniform i.i.d. positions on the box.

    With ``min_separation > 0`` agents that take part in a too-close pair are
    redrawn (one agent per offending pair) until every pairwise distance
    exceeds ``min_separation``. Whole-configuration rejection is hopeless for
    hundreds of agents, so only offenders are resampled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    check_positive(min_separation, "min_separation", allow_zero=True)
    rng = as_generator(seed)
    m = space.box_half_width
    pos = rng.uniform(-m, m, size=(n, 2))
    if min_separation > 0 and n > 1:
        for _ in range(max_rounds):
            pairs = cKDTree(pos).query_pairs(min_separation, output_type="ndarray")
            # query_pairs is inclusive of the radius; strict separation is required
            if pairs.size == 0:
                break
            redo = np.unique(pairs.max(axis=1))
            pos[redo] = rng.uniform(-m, m, size=(redo.size, 2))
        else:
            raise InfeasibleSeparationError(
                f"could not place {n} agents with separation > {min_separation} "
                f"in {max_rounds} rounds"
            )
    return SwarmState(pos, 0, _checked=True)


def step_swarm(
    state: SwarmState,
    actions,
    space: SpaceConfig,
    seed: SeedLike = None,
) -> SwarmState:
    """x' = clip_box(x + u + eps) with eps ~ N(0, diag(noise_std^2)).

    ``seed`` may be omitted when the space is noiseless.
    """
    acts = np.asarray(actions, dtype=float)
    if acts.shape != state.positions.shape:
        raise ValueError(
            f"action batch shape {acts.shape} does not match positions {state.positions.shape}"
        )
    nxt = state.positions + acts
    if not space.noiseless:
        rng = as_generator(seed)
        nxt = nxt + rng.normal(size=nxt.shape) * np.asarray(space.noise_std)
    nxt = clip_to_box(nxt, space.box_half_width)
    return SwarmState(nxt, state.time_index + 1, _checked=True)


def with_positions(state: SwarmState, positions: np.ndarray) -> SwarmState:
    return replace(state, positions=positions, _checked=True)
