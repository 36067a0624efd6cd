"""Mean-field control of 2D agent swarms.

Histogram mean-field MDPs for Aggregation, Formation and Task Allocation,
a numpy PPO trainer, exact Wasserstein-1 distances, potential-field
collision avoidance and a reproducible experiment CLI.
"""

__version__ = "0.1.0"

from .collision import ApfConfig, run_with_collision_avoidance  # noqa: E402
from .envs import EnvConfig, EnvKind, SwarmEnv  # noqa: E402
from .estimators import HistogramEncoder, MeanFieldPPO  # noqa: E402
from .meanfield import GridSpec, MeanFieldAction, OpenLoopSequence  # noqa: E402
from .ppo import PpoConfig, evaluate, train  # noqa: E402
from .sim_core import SpaceConfig, SwarmState  # noqa: E402
from .transport import PointCloud, wasserstein1  # noqa: E402

__all__ = [
    "ApfConfig", "EnvConfig", "EnvKind", "GridSpec", "HistogramEncoder", "MeanFieldAction",
    "MeanFieldPPO", "OpenLoopSequence", "PointCloud", "PpoConfig", "SpaceConfig", "SwarmEnv",
    "SwarmState", "evaluate", "run_with_collision_avoidance", "train", "wasserstein1",
]
