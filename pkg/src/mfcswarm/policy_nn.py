"""Tanh MLP policy/value networks with analytic gradients.

Parameters live in a flat ``dict[str, ndarray]`` so the optimizer, finite
difference checks and checkpoints can treat them uniformly. Policy layers are
named ``pi.W{k}``/``pi.b{k}`` plus the state-independent ``pi.log_std``;
value layers are ``vf.W{k}``/``vf.b{k}``. Weight matrices are (fan_in, fan_out).
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._validation import SeedLike, as_generator
from .meanfield import SIGMA_FLOOR, SIGMA_MAX, THETA_BOUND, MeanFieldAction
from .sim_core import clip_to_disc

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
OUTPUT_SCALE = 0.01
CHECKPOINT_FORMAT = "mfcswarm.checkpoint"
CHECKPOINT_VERSION = 1

SQUASH_SPEC = {
    "theta": {"scale": THETA_BOUND, "offset": 0.0},
    "sigma": {"scale": SIGMA_MAX / 2, "offset": SIGMA_MAX / 2, "floor": SIGMA_FLOOR},
}


@dataclass
class PolicyParams:
    arrays: dict[str, np.ndarray]
    obs_dim: int
    action_dim: int
    hidden: tuple[int, ...] = (256, 256)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()}, self.obs_dim, self.action_dim, self.hidden)

    def shape_config(self) -> dict:
        return {"obs_dim": self.obs_dim, "action_dim": self.action_dim, "hidden": list(self.hidden)}


def init_params(
    obs_dim: int,
    action_dim: int,
    hidden: tuple[int, ...] = (256, 256),
    seed: SeedLike = 0,
    init_log_std: float = 0.0,
) -> PolicyParams:
    """Fan-in scaled uniform init; the policy output layer is shrunk by 0.01."""
    rng = as_generator(seed)
    sizes = [obs_dim, *hidden]
    arrays: dict[str, np.ndarray] = {}
    for prefix, out_dim, out_scale in (("pi", action_dim, OUTPUT_SCALE), ("vf", 1, 1.0)):
        dims = sizes + [out_dim]
        for k in range(len(dims) - 1):
            bound = 1.0 / math.sqrt(dims[k])
            scale = out_scale if k == len(dims) - 2 else 1.0
            arrays[f"{prefix}.W{k}"] = rng.uniform(-bound, bound, size=(dims[k], dims[k + 1])) * scale
            arrays[f"{prefix}.b{k}"] = np.zeros(dims[k + 1])
    arrays["pi.log_std"] = np.full(action_dim, float(init_log_std))
    return PolicyParams(arrays, obs_dim, action_dim, tuple(hidden))


def _mlp_forward(arrays, prefix: str, n_layers: int, x: np.ndarray):
    acts = [x]
    h = x
    for k in range(n_layers):
        z = h @ arrays[f"{prefix}.W{k}"] + arrays[f"{prefix}.b{k}"]
        h = np.tanh(z) if k < n_layers - 1 else z
        acts.append(h)
    return h, acts


def _mlp_backward(arrays, prefix: str, n_layers: int, acts, dout: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    g = dout
    for k in reversed(range(n_layers)):
        if k < n_layers - 1:
            g = g * (1.0 - acts[k + 1] ** 2)
        grads[f"{prefix}.W{k}"] = acts[k].T @ g
        grads[f"{prefix}.b{k}"] = g.sum(axis=0)
        if k > 0:
            g = g @ arrays[f"{prefix}.W{k}"].T
    return grads


def _check_obs(p: PolicyParams, obs) -> np.ndarray:
    x = np.asarray(obs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != p.obs_dim:
        raise ValueError(f"observation has {x.shape[-1]} features, network expects {p.obs_dim}")
    return x


class ForwardCache(NamedTuple):
    policy_acts: list
    value_acts: list | None
    log_std_raw: np.ndarray


def forward_policy(p: PolicyParams, obs, *, return_cache: bool = False):
    """Mean and log-std of the action distribution, one row per observation."""
    x = _check_obs(p, obs)
    mean, acts = _mlp_forward(p.arrays, "pi", p.n_layers, x)
    raw = p.arrays["pi.log_std"]
    log_std = np.broadcast_to(np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), mean.shape)
    if return_cache:
        return mean, log_std, ForwardCache(acts, None, raw)
    return mean, log_std


def forward_value(p: PolicyParams, obs, *, return_cache: bool = False):
    x = _check_obs(p, obs)
    v, acts = _mlp_forward(p.arrays, "vf", p.n_layers, x)
    if return_cache:
        return v[:, 0], acts
    return v[:, 0]


def backward(
    p: PolicyParams,
    cache: ForwardCache | None,
    d_mean: np.ndarray | None = None,
    d_log_std: np.ndarray | None = None,
    value_acts: list | None = None,
    d_value: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients w.r.t. the network outputs.

    ``d_mean`` and ``d_log_std`` are per-row (batch, action_dim); ``d_value``
    is per-row (batch,). Outputs without an upstream gradient contribute zero.
    """
    grads = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    if d_mean is not None or d_log_std is not None:
        if cache is None:
            raise RuntimeError("policy gradients need the forward cache")
        if d_mean is not None:
            grads.update(_mlp_backward(p.arrays, "pi", p.n_layers, cache.policy_acts, np.asarray(d_mean)))
        if d_log_std is not None:
            raw = cache.log_std_raw
            live = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
            grads["pi.log_std"] = np.asarray(d_log_std).reshape(-1, p.action_dim).sum(axis=0) * live
    if d_value is not None:
        if value_acts is None:
            raise RuntimeError("value gradients need the value forward cache")
        grads.update(_mlp_backward(p.arrays, "vf", p.n_layers, value_acts, np.asarray(d_value)[:, None]))
    return grads


def gaussian_log_prob(x, mean, log_std) -> np.ndarray:
    """Diagonal Gaussian log density, summed over the last axis."""
    z = (np.asarray(x) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi), axis=-1)


def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new) -> np.ndarray:
    """KL(old || new) for diagonal Gaussians, summed over the last axis."""
    var_old = np.exp(2 * log_std_old)
    var_new = np.exp(2 * log_std_new)
    return np.sum(
        log_std_new - log_std_old + (var_old + (mean_old - mean_new) ** 2) / (2 * var_new) - 0.5,
        axis=-1,
    )


class ActionSample(NamedTuple):
    sample: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray


def sample_action(mean, log_std, seed: SeedLike) -> ActionSample:
    """Gaussian draw; ``action`` is the [-1, 1]-clipped value fed to the env.

    ``log_prob`` is the density of the unclipped ``sample``, which is what the
    importance ratio must be computed on.
    """
    rng = as_generator(seed)
    mean = np.asarray(mean, dtype=float)
    log_std = np.clip(np.asarray(log_std, dtype=float), LOG_STD_MIN, LOG_STD_MAX)
    sample = mean + np.exp(log_std) * rng.standard_normal(size=mean.shape)
    return ActionSample(sample, np.clip(sample, -1.0, 1.0), gaussian_log_prob(sample, mean, log_std))


def squash_to_mfc(raw, per_bin: bool = True) -> MeanFieldAction:
    """Map a [-1, 1] action vector to per-bin (theta, sigma).

    Layout is (bins, 4) row-major with columns theta_x, theta_y, sigma_1, sigma_2.
    """
    v = np.clip(np.asarray(raw, dtype=float), -1.0, 1.0).reshape(-1, 4)
    if not per_bin and v.shape[0] != 1:
        raise ValueError("global mode expects a 4-dimensional action")
    theta = SQUASH_SPEC["theta"]["scale"] * v[:, :2]
    sig = SQUASH_SPEC["sigma"]
    sigma = np.maximum(sig["floor"], sig["scale"] * v[:, 2:] + sig["offset"])
    return MeanFieldAction(theta, sigma)


def squash_movement(raw, action_radius: float = THETA_BOUND) -> np.ndarray:
    """Per-agent (MARL) action: [-1, 1]^2 scaled to the action square, then disc-clipped."""
    u = action_radius * np.clip(np.asarray(raw, dtype=float), -1.0, 1.0)
    return clip_to_disc(u, action_radius)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, p: PolicyParams, **kw) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in p.arrays.items()},
            {k: np.zeros_like(a) for k, a in p.arrays.items()},
            **kw,
        )


def adam_update(p: PolicyParams, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> tuple[PolicyParams, AdamState]:
    if set(grads) != set(p.arrays):
        raise ValueError("gradient keys do not match parameters")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_arrays, new_m, new_v = {}, {}, {}
    for k, w in p.arrays.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {w.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_arrays[k] = w - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    out = PolicyParams(new_arrays, p.obs_dim, p.action_dim, p.hidden)
    return out, AdamState(new_m, new_v, t, b1, b2, state.eps)


@dataclass
class Checkpoint:
    params: PolicyParams
    optimizer: AdamState | None
    metadata: dict


def save_checkpoint(path, params: PolicyParams, optimizer: AdamState | None = None, metadata: dict | None = None) -> None:
    """Write an ``.npz`` container; arrays are stored losslessly, metadata as JSON."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "shape": params.shape_config(),
        "squash": SQUASH_SPEC,
        "param_shapes": {k: list(v.shape) for k, v in params.arrays.items()},
        "optimizer": None
        if optimizer is None
        else {"t": optimizer.t, "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps},
        "extra": metadata or {},
    }
    payload = {f"param/{k}": v for k, v in params.arrays.items()}
    if optimizer is not None:
        payload.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
        payload.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a policy checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        shape = meta["shape"]
        params = PolicyParams(arrays, shape["obs_dim"], shape["action_dim"], tuple(shape["hidden"]))
        for k, s in meta["param_shapes"].items():
            if list(arrays[k].shape) != s:
                raise ValueError(f"checkpoint array {k} has shape {arrays[k].shape}, expected {s}")
        opt = None
        if meta["optimizer"] is not None:
            o = meta["optimizer"]
            opt = AdamState(
                {k[len("adam_m/"):]: z[k].copy() for k in z.files if k.startswith("adam_m/")},
                {k[len("adam_v/"):]: z[k].copy() for k in z.files if k.startswith("adam_v/")},
                o["t"], o["beta1"], o["beta2"], o["eps"],
            )
    return Checkpoint(params, opt, meta["extra"])
