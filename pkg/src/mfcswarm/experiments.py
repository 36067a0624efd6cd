"""Experiment drivers behind the CLI subcommands.

Every driver takes a resolved config dict (see :mod:`mfcswarm.config`) and an
output directory, writes its CSV/JSON artifacts there and returns a summary
dict plus the list of files it produced. Random streams are keyed by
(seed, purpose, N, episode) so any subset of the work can be recomputed in
isolation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._validation import child_seed
from .collision import closed_loop, run_with_collision_avoidance, write_safety_csv
from .config import apf_config, env_config, ppo_config
from .envs import EnvKind, SwarmEnv
from .meanfield import record_open_loop, replay_open_loop
from .policy_nn import init_params, load_checkpoint
from .ppo import MeanFieldActor, TrainState, evaluate, policy_shape, run_episode, train
from .sim_core import sample_initial

log = logging.getLogger(__name__)

Z95 = 1.959963984540054

# stream purposes, the second component of every child_seed key
_EVAL, _CONV, _REF, _RECORD, _CLOSED, _OPEN, _SWEEP_INIT, _SWEEP_DYN, _POLICY = range(9)


class ExperimentError(RuntimeError):
    """A command cannot run with the given inputs (bad checkpoint, wrong env...)."""


def mean_ci(values) -> dict:
    """Mean with a normal-approximation 95% interval; degenerate for n < 2."""
    x = np.asarray(values, dtype=float)
    n = x.size
    mean = float(x.mean())
    if n < 2:
        return {"mean": mean, "std": 0.0, "ci_low": mean, "ci_high": mean, "n": n, "degenerate": True}
    std = float(x.std(ddof=1))
    half = Z95 * std / math.sqrt(n)
    return {"mean": mean, "std": std, "ci_low": mean - half, "ci_high": mean + half, "n": n, "degenerate": False}


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_rows(path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) if not isinstance(row[c], str) else row[c] for c in columns])


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _load_state(cfg: dict) -> tuple[TrainState, dict]:
    path = cfg["run"]["checkpoint"]
    if not path:
        raise ExperimentError("this command needs --checkpoint")
    if not Path(path).exists():
        raise ExperimentError(f"checkpoint not found: {path}")
    meta = load_checkpoint(path).metadata
    return TrainState.load(path), meta


def _checked_env(cfg: dict, state: TrainState, meta: dict, **changes):
    kind = EnvKind.parse(cfg["env"]["kind"])
    if "env" in meta and EnvKind.parse(meta["env"]) is not kind:
        raise ExperimentError(f"checkpoint was trained on {meta['env']}, config asks for {kind.value}")
    env = env_config(cfg, **changes)
    want = policy_shape(env, bool(meta.get("marl", False)))
    have = (state.params.obs_dim, state.params.action_dim)
    if want != have:
        raise ExperimentError(f"checkpoint shape {have} does not fit env {env.kind.value} {want}")
    return env


# ---------------------------------------------------------------- train


def run_train(cfg: dict, out: Path) -> tuple[dict, list[str]]:
    env = env_config(cfg)
    ppo = ppo_config(cfg)
    marl = bool(cfg["run"]["marl"])
    state, rows = train(env, ppo, cfg["run"]["seed"], marl=marl, out_dir=out)
    summary = {
        "iterations": len(rows),
        "env_steps": state.env_steps,
        "transitions_per_env_step": env.n_agents if marl else 1,
        "final_mean_return": rows[-1]["mean_return"] if rows else None,
        "first_mean_return": rows[0]["mean_return"] if rows else None,
    }
    return summary, ["curve.csv", "checkpoint.npz"]


# ---------------------------------------------------------------- eval

EVAL_COLUMNS = ["n_agents", "episodes", "mean_return", "std_return", "ci_low", "ci_high", "ci_degenerate"]


def run_eval(cfg: dict, out: Path) -> tuple[dict, list[str]]:
    state, meta = _load_state(cfg)
    run = cfg["run"]
    marl = bool(meta.get("marl", False))
    rows = []
    for n in run["n_list"]:
        env = _checked_env(cfg, state, meta, n_agents=n)
        rets = evaluate(env, state.params, run["episodes"], child_seed(run["seed"], _EVAL, n),
                        deterministic=run["deterministic"], marl=marl)
        s = mean_ci(rets)
        rows.append({"n_agents": n, "episodes": run["episodes"], "mean_return": s["mean"], "std_return": s["std"],
                     "ci_low": s["ci_low"], "ci_high": s["ci_high"], "ci_degenerate": s["degenerate"]})
    write_rows(out / "eval.csv", EVAL_COLUMNS, rows)
    summary = {"env": meta.get("env"), "marl": marl, "rows": rows}
    write_json(out / "eval_summary.json", summary)
    return summary, ["eval.csv", "eval_summary.json"]


# ---------------------------------------------------------------- convergence

CONV_COLUMNS = ["n_agents", "t", "episodes", "mean_gap", "std_gap", "ci_low", "ci_high"]


def fixed_test_policy(env, seed: int, hidden=(256, 256)):
    """Randomly initialised network, frozen: a Lipschitz closed-loop policy."""
    return init_params(env.obs_dim, env.action_dim, hidden, child_seed(seed, _POLICY))


def reward_path(env_cfg, params, n_agents: int, steps: int, seed) -> np.ndarray:
    """Rewards r_0..r_{steps-1} of one closed-loop run with ``n_agents`` agents."""
    env = SwarmEnv(replace(env_cfg, n_agents=n_agents, horizon=steps))
    actor = MeanFieldActor(params, env_cfg.per_bin_actions, deterministic=True)
    obs = env.reset(seed)
    out = np.empty(steps)
    for t in range(steps):
        obs, out[t], _, _ = env.step(actor(obs))
    return out


def fit_loglog_slope(ns, gaps) -> float:
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(gaps, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def run_convergence(cfg: dict, out: Path) -> tuple[dict, list[str]]:
    run = cfg["run"]
    seed = run["seed"]
    if run["checkpoint"]:
        state, meta = _load_state(cfg)
        if meta.get("marl"):
            raise ExperimentError("convergence needs a mean-field checkpoint")
        env = _checked_env(cfg, state, meta)
        params = state.params
        policy_desc = f"checkpoint:{run['checkpoint']}"
    else:
        env = env_config(cfg)
        params = fixed_test_policy(env, seed, tuple(cfg["ppo"]["hidden"]))
        policy_desc = "fixed-random-network"
    t_list = sorted(int(t) for t in run["t_list"])
    steps = t_list[-1] + 1
    ref = reward_path(env, params, run["ref_particles"], steps, child_seed(seed, _REF))
    gaps = {}
    for n in run["n_list"]:
        g = np.empty((len(t_list), run["episodes"]))
        for k in range(run["episodes"]):
            path = reward_path(env, params, n, steps, child_seed(seed, _CONV, n, k))
            g[:, k] = np.abs(path[t_list] - ref[t_list])
        gaps[n] = g
    rows, slopes = [], {}
    for i, t in enumerate(t_list):
        means = []
        for n in run["n_list"]:
            s = mean_ci(gaps[n][i])
            rows.append({"n_agents": n, "t": t, "episodes": run["episodes"], "mean_gap": s["mean"],
                         "std_gap": s["std"], "ci_low": s["ci_low"], "ci_high": s["ci_high"]})
            means.append(s["mean"])
        slopes[t] = fit_loglog_slope(run["n_list"], means) if len(means) > 1 else float("nan")
    write_rows(out / "convergence.csv", CONV_COLUMNS, rows)
    summary = {
        "env": env.kind.value,
        "policy": policy_desc,
        "ref_particles": run["ref_particles"],
        "reference_rewards": ref.tolist(),
        "slopes": {str(t): s for t, s in slopes.items()},
        "rows": rows,
    }
    write_json(out / "convergence_summary.json", summary)
    return summary, ["convergence.csv", "convergence_summary.json"]


# ---------------------------------------------------------------- open loop

OPENLOOP_COLUMNS = [
    "n_agents", "episodes", "closed_mean", "closed_ci_low", "closed_ci_high",
    "open_mean", "open_ci_low", "open_ci_high", "rel_gap",
]


def run_openloop(cfg: dict, out: Path) -> tuple[dict, list[str]]:
    state, meta = _load_state(cfg)
    run = cfg["run"]
    seed = run["seed"]
    kind = EnvKind.parse(cfg["env"]["kind"])
    if EnvKind.TASK_ALLOCATION in (kind, EnvKind.parse(meta.get("env", kind.value))):
        raise ExperimentError(
            "open-loop control needs a deterministic mean-field limit; "
            "task allocation has random task arrivals"
        )
    if meta.get("marl"):
        raise ExperimentError("open-loop recording needs a mean-field checkpoint")
    ens_env = _checked_env(cfg, state, meta, n_agents=run["ensemble_particles"])
    actor = MeanFieldActor(state.params, ens_env.per_bin_actions, deterministic=run["deterministic"],
                           seed=child_seed(seed, _RECORD, 1))
    seq = record_open_loop(SwarmEnv(ens_env), actor, child_seed(seed, _RECORD, 0))
    seq.metadata.update({"checkpoint": run["checkpoint"], "particles": run["ensemble_particles"], "seed": seed})
    seq.save(out / "open_loop_sequence.json")

    rows = []
    for n in run["n_list"]:
        env = _checked_env(cfg, state, meta, n_agents=n)
        closed, opened = np.empty(run["episodes"]), np.empty(run["episodes"])
        for k in range(run["episodes"]):
            ep = child_seed(seed, _CLOSED, n, k)
            init_ss, dyn_ss = ep.spawn(2)
            init = sample_initial(n, env.space, env.min_separation, init_ss)
            dyn_a, dyn_b, act_ss = dyn_ss.spawn(3)
            a = MeanFieldActor(state.params, env.per_bin_actions, run["deterministic"], act_ss)
            closed[k] = run_episode(env, a, dyn_a, state=init)["return"]
            opened[k] = replay_open_loop(seq, SwarmEnv(env), dyn_b, state=init)["return"]
        c, o = mean_ci(closed), mean_ci(opened)
        rows.append({
            "n_agents": n, "episodes": run["episodes"],
            "closed_mean": c["mean"], "closed_ci_low": c["ci_low"], "closed_ci_high": c["ci_high"],
            "open_mean": o["mean"], "open_ci_low": o["ci_low"], "open_ci_high": o["ci_high"],
            "rel_gap": abs(o["mean"] - c["mean"]) / abs(c["mean"]) if c["mean"] else float("inf"),
        })
    write_rows(out / "openloop.csv", OPENLOOP_COLUMNS, rows)
    summary = {"env": kind.value, "horizon": seq.horizon, "rows": rows}
    write_json(out / "openloop_summary.json", summary)
    return summary, ["open_loop_sequence.json", "openloop.csv", "openloop_summary.json"]


# ---------------------------------------------------------------- c_rep sweep

SWEEP_COLUMNS = [
    "mode", "n_agents", "c_rep", "episodes", "mean_return", "ci_low", "ci_high",
    "mean_min_distance", "min_min_distance", "singularity_count",
]


def run_sweep_crep(cfg: dict, out: Path) -> tuple[dict, list[str]]:
    state, meta = _load_state(cfg)
    if meta.get("marl"):
        raise ExperimentError("the c_rep sweep needs a mean-field checkpoint")
    run = cfg["run"]
    seed = run["seed"]
    modes = [("plain", None)] + [("apf", float(c)) for c in run["crep_list"]]
    rows, safety = [], []
    init_sep = cfg["apf"]["init_separation"]
    for n in run["n_list"]:
        env = _checked_env(cfg, state, meta, n_agents=n)
        inits = [sample_initial(n, env.space, init_sep, child_seed(seed, _SWEEP_INIT, n, k))
                 for k in range(run["episodes"])]
        for mode, c_rep in modes:
            apf = None if c_rep is None else apf_config(cfg, c_rep)
            rets, dmins, sing = [], [], 0
            for k in range(run["episodes"]):
                dyn = child_seed(seed, _SWEEP_DYN, n, k)
                actor = MeanFieldActor(state.params, env.per_bin_actions, run["deterministic"], dyn.spawn(1)[0])
                res = run_with_collision_avoidance(env, closed_loop(actor), apf, dyn, state=inits[k])
                rets.append(res["return"])
                dmins.append(res["min_distance"])
                sing += res["singularity_count"]
                safety.append({"episode": k, "n_agents": n, "c_rep": float("nan") if c_rep is None else c_rep,
                               "return": res["return"], "min_distance": res["min_distance"],
                               "singularity_count": res["singularity_count"]})
            s = mean_ci(rets)
            rows.append({
                "mode": mode, "n_agents": n, "c_rep": float("nan") if c_rep is None else c_rep,
                "episodes": run["episodes"], "mean_return": s["mean"], "ci_low": s["ci_low"], "ci_high": s["ci_high"],
                "mean_min_distance": float(np.mean(dmins)), "min_min_distance": float(np.min(dmins)),
                "singularity_count": sing,
            })
            log.info("sweep N=%d %s c_rep=%s return %.4f min dist %.4f", n, mode, c_rep, s["mean"], np.mean(dmins))
    write_rows(out / "sweep.csv", SWEEP_COLUMNS, rows)
    write_safety_csv(out / "safety.csv", safety)
    summary = {"env": meta.get("env"), "rows": rows}
    write_json(out / "sweep_summary.json", summary)
    return summary, ["sweep.csv", "safety.csv", "sweep_summary.json"]
