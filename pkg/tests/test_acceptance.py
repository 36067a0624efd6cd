"""Acceptance suite: each test checks one criterion at its stated tolerance.

Every test prints a single ``[acceptance] criterion k ...: PASS|FAIL`` line;
the lines are repeated in the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest

from gradcheck import check_draw
from mfcswarm.cli import main
from mfcswarm.collision import ApfConfig, apf_velocity, integrate_epoch, repulsion
from mfcswarm.config import env_config, load_config, ppo_config
from mfcswarm.envs import (
    EnvConfig,
    EnvKind,
    aggregation_reward,
    apply_actions,
    formation_reward,
    reset,
    task_progress,
)
from mfcswarm.experiments import mean_ci, run_convergence, run_openloop, run_sweep_crep
from mfcswarm.meanfield import MeanFieldAction, sample_decision_rule
from mfcswarm.ppo import compute_gae, train
from mfcswarm.sim_core import SpaceConfig
from mfcswarm.transport import PointCloud, wasserstein1


def config(**values):
    """Default configuration with ``section__key`` overrides; the shell environment is ignored."""
    overrides = {tuple(k.split("__")): v for k, v in values.items()}
    return load_config(None, overrides, environ={})


# ---------------------------------------------------------------- 1


def test_criterion_01_ot_oracle(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 9))
        a, b = rng.uniform(-2, 2, (n, 2)), rng.uniform(-2, 2, (n, 2))
        C = np.linalg.norm(a[:, None] - b[None], axis=2)
        perms = np.array(list(itertools.permutations(range(n))))
        oracle = C[np.arange(n), perms].sum(axis=1).min() / n
        for method in ("assignment", "simplex"):
            got = wasserstein1(PointCloud.uniform(a), PointCloud.uniform(b), method=method)
            worst = max(worst, abs(got - oracle))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    report(1, "OT oracle equivalence", ok, f"max |W1 - oracle| {worst:.2e} over both routes, {elapsed:.2f} s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_02_gradients(report):
    start = time.perf_counter()
    worst = max(check_draw(seed) for seed in range(100))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    report(2, "gradient correctness", ok, f"max rel error {worst:.2e}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 3


def decreasing_within_ci(rows) -> bool:
    """No significant increase: each later mean is below the earlier mean or the CIs overlap."""
    for prev, nxt in zip(rows, rows[1:]):
        if nxt["mean_gap"] > prev["mean_gap"] and nxt["ci_low"] > prev["ci_high"]:
            return False
    return True


@pytest.mark.slow
def test_criterion_03_convergence_trend(report, tmp_path):
    cfg = config(run__episodes=200, run__n_list=[10, 50, 100, 300], run__t_list=[10], run__seed=0)
    start = time.perf_counter()
    summary, _ = run_convergence(cfg, tmp_path)
    elapsed = time.perf_counter() - start
    rows = summary["rows"]
    slope = summary["slopes"]["10"]
    monotone = decreasing_within_ci(rows)
    ok = monotone and -0.65 <= slope <= -0.35 and elapsed < 600
    gaps = ", ".join(f"N={r['n_agents']}: {r['mean_gap']:.4f}" for r in rows)
    report(3, "finite-N convergence trend", ok, f"{gaps}; slope {slope:.3f}; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 4 and 5


@pytest.fixture(scope="module")
def aggregation_runs(tmp_path_factory):
    """Three seeds of desk-scale aggregation training with the default hyperparameters."""
    cfg = config(env__kind="aggregation", env__n_agents=300, ppo__iterations=100)
    env, ppo = env_config(cfg), ppo_config(cfg)
    runs = []
    for seed in range(3):
        out = tmp_path_factory.mktemp(f"agg{seed}")
        start = time.perf_counter()
        _, rows = train(env, ppo, seed, out_dir=out)
        runs.append({"rows": rows, "dir": out, "seconds": time.perf_counter() - start})
    return runs


@pytest.mark.slow
def test_criterion_04_training_improvement(report, aggregation_runs):
    first = [r["mean_return"] for run in aggregation_runs for r in run["rows"][:10]]
    last = [r["mean_return"] for run in aggregation_runs for r in run["rows"][-10:]]
    a, b = mean_ci(first), mean_ci(last)
    slowest = max(run["seconds"] for run in aggregation_runs)
    steps = aggregation_runs[0]["rows"][-1]["env_steps"]
    ok = b["ci_low"] > a["ci_high"] and slowest < 7200 and steps <= 400_000
    per_seed = ", ".join(
        f"seed {k}: {np.mean([r['mean_return'] for r in run['rows'][:10]]):.2f} -> "
        f"{np.mean([r['mean_return'] for r in run['rows'][-10:]]):.2f}"
        for k, run in enumerate(aggregation_runs)
    )
    report(4, "training improvement", ok,
           f"first 10 CI [{a['ci_low']:.2f}, {a['ci_high']:.2f}], last 10 CI [{b['ci_low']:.2f}, {b['ci_high']:.2f}]; "
           f"{per_seed}; {steps} env steps; slowest seed {slowest:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_05_open_loop_parity(report, aggregation_runs, tmp_path):
    ckpt = aggregation_runs[0]["dir"] / "checkpoint.npz"
    cfg = config(env__kind="aggregation", run__checkpoint=str(ckpt), run__n_list=[300], run__episodes=100)
    start = time.perf_counter()
    summary, _ = run_openloop(cfg, tmp_path)
    elapsed = time.perf_counter() - start
    row = summary["rows"][0]
    ok = row["rel_gap"] <= 0.05 and elapsed < 600
    report(5, "open-loop parity", ok,
           f"closed {row['closed_mean']:.3f}, open {row['open_mean']:.3f}, gap {100 * row['rel_gap']:.2f}%, {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 6


@pytest.fixture(scope="module")
def formation_checkpoint(tmp_path_factory):
    cfg = config(env__kind="formation", env__n_agents=100, ppo__iterations=10)
    out = tmp_path_factory.mktemp("formation")
    train(env_config(cfg), ppo_config(cfg), 0, out_dir=out)
    return out / "checkpoint.npz"


@pytest.mark.slow
def test_criterion_06_collision_avoidance_trend(report, formation_checkpoint, tmp_path):
    cfg = config(env__kind="formation", run__checkpoint=str(formation_checkpoint), run__n_list=[100],
                 run__crep_list=[0.01, 0.1, 1.0], run__episodes=100)
    start = time.perf_counter()
    summary, _ = run_sweep_crep(cfg, tmp_path)
    elapsed = time.perf_counter() - start
    rows = summary["rows"]
    plain = next(r for r in rows if r["mode"] == "plain")
    apf = sorted((r for r in rows if r["mode"] == "apf"), key=lambda r: r["c_rep"])
    dmin = [r["mean_min_distance"] for r in apf]
    nondecreasing = all(b >= a for a, b in zip(dmin, dmin[1:]))
    weak_gap = abs(apf[0]["mean_return"] - plain["mean_return"]) / abs(plain["mean_return"])
    ok = nondecreasing and weak_gap <= 0.10 and elapsed < 1800
    detail = "; ".join(
        f"c_rep {r['c_rep']}: return {r['mean_return']:.2f}, mean min dist {r['mean_min_distance']:.4f}, "
        f"singular pairs {r['singularity_count']}" for r in apf
    )
    report(6, "collision-avoidance trend", ok,
           f"plain return {plain['mean_return']:.2f}, mean min dist {plain['mean_min_distance']:.4f}; {detail}; "
           f"weak-avoidance gap {100 * weak_gap:.1f}%; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_07_apf_analytics(report):
    cfg = ApfConfig(c_rep=1.0)
    # offsets whose floating-point norm is exactly one
    unit = np.array([[1.0, 0.0], [0.0, -1.0], [0.6, 0.8], [-0.8, 0.6], [0.28, -0.96]])
    assert np.all(np.linalg.norm(unit, axis=1) == 1.0)
    at_one = float(np.abs(repulsion(unit, cfg)).max())
    x = np.array([[0.0, 0.0], [0.5, 0.0]])
    magnitude = np.linalg.norm(apf_velocity(0, x, x, cfg))
    x0, target = np.array([[0.3, -0.7]]), np.array([[-0.2, 0.4]])
    res = integrate_epoch(x0, target, ApfConfig(c_rep=0.0), SpaceConfig())
    closed_form = np.linalg.norm(target - x0) * 0.97**100
    contraction_err = abs(res.max_deviation - closed_form)
    ok = at_one == 0.0 and abs(magnitude - 6.0) <= 1e-12 and contraction_err <= 1e-9
    report(7, "APF analytic checks", ok,
           f"repulsion at |d|=1: {at_one}, |v| at 0.5: {float(magnitude)!r}, contraction error {contraction_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 8


def _random_rule(rng):
    return MeanFieldAction(rng.uniform(-0.2, 0.2, (36, 2)), rng.uniform(1e-3, 0.25, (36, 2)))


def run_invariant_suite(kind: EnvKind, total_steps: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    bad = {"histogram": 0, "task_count": 0, "progress": 0, "aggregation_sign": 0, "box": 0, "permutation": 0}
    steps = 0
    while steps < total_steps:
        n = int(rng.integers(1, 41))
        noise = float(rng.choice([0.0, 0.05]))
        # the formation target is sampled at the swarm size so W1 stays a square assignment
        cfg = EnvConfig(kind, n_agents=n, horizon=20, space=SpaceConfig(noise_std=(noise, noise)), target_samples=n)
        state, tasks, obs = reset(cfg, rng)
        for _ in range(cfg.horizon):
            h = _random_rule(rng)
            actions = sample_decision_rule(h, state.positions, cfg.grid, rng, cfg.space.action_radius)
            x = state.positions
            perm = rng.permutation(n)
            if kind is EnvKind.AGGREGATION:
                r = aggregation_reward(x, actions, cfg.move_cost)
                bad["aggregation_sign"] += r > 0
                bad["permutation"] += abs(r - aggregation_reward(x[perm], actions[perm], cfg.move_cost)) > 1e-12
            elif kind is EnvKind.FORMATION:
                key = int(rng.integers(1 << 31))
                r = formation_reward(x, cfg, key)
                bad["permutation"] += abs(r - formation_reward(x[perm], cfg, key)) > 1e-12
            else:
                delta = task_progress(x, tasks, cfg.task_radius)
                bad["progress"] += int(np.any((delta < 0) | (delta > 1)))
                bad["permutation"] += abs(delta.sum() - task_progress(x[perm], tasks, cfg.task_radius).sum()) > 1e-12
            state, tasks, obs, _ = apply_actions(state, tasks, actions, cfg, rng)
            bad["histogram"] += abs(obs.state_hist.sum() - 1.0) > 1e-9
            bad["task_count"] += len(tasks) > 5
            bad["box"] += int(np.any(np.abs(state.positions) > cfg.space.box_half_width))
            steps += 1
            if steps >= total_steps:
                break
    return {k: int(v) for k, v in bad.items()}


@pytest.mark.slow
def test_criterion_08_environment_invariants(report):
    start = time.perf_counter()
    violations = {kind.value: run_invariant_suite(kind, 100_000, seed=k) for k, kind in enumerate(EnvKind)}
    elapsed = time.perf_counter() - start
    total = sum(sum(v.values()) for v in violations.values())
    report(8, "environment invariants", total == 0,
           f"10^5 steps per env, violations {violations}, {elapsed:.0f} s")
    assert total == 0


# ---------------------------------------------------------------- 9

TINY_INI = """
[ppo]
train_batch = 100
minibatch = 50
n_envs = 2
hidden = 8
epochs = 2
[env]
n_agents = 10
[run]
ref_particles = 200
ensemble_particles = 50
episodes = 2
n_list = 10,20
t_list = 3
crep_list = 0.01,1.0
"""


def test_criterion_09_manifest_reruns(report, tmp_path):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY_INI)
    base = ["--config", str(ini), "--seed", "7"]
    runs = {"train": ["--iters", "2"]}
    assert main(["train", *base, "--out", str(tmp_path / "train"), "--iters", "2"]) == 0
    ckpt = str(tmp_path / "train" / "checkpoint.npz")
    for command in ("eval", "convergence", "openloop", "sweep-crep"):
        runs[command] = ["--checkpoint", ckpt] if command != "convergence" else []
        assert main([command, *base, *runs[command], "--out", str(tmp_path / command)]) == 0
    assert main(["train", *base, "--marl", "--agents", "4", "--iters", "1", "--out", str(tmp_path / "marl")]) == 0
    runs["marl"] = []
    csvs = [tmp_path / c / n for c in ("eval", "sweep-crep") for n in ("eval.csv", "sweep.csv", "safety.csv")
            if (tmp_path / c / n).exists()]
    assert main(["plot", *map(str, csvs), "--out", str(tmp_path / "figs")]) == 0

    mismatched, compared = [], 0
    for name in runs:
        again = tmp_path / f"{name}_again"
        assert main(["rerun", str(tmp_path / name / "manifest.json"), "--out", str(again)]) == 0
        for f in sorted((tmp_path / name).glob("*.csv")):
            compared += 1
            if f.read_bytes() != (again / f.name).read_bytes():
                mismatched.append(f"{name}/{f.name}")
    assert main(["rerun", str(tmp_path / "figs" / "plot_manifest.json"), "--out", str(tmp_path / "figs_again")]) == 0
    for f in sorted((tmp_path / "figs").glob("*.svg")):
        compared += 1
        if f.read_bytes() != (tmp_path / "figs_again" / f.name).read_bytes():
            mismatched.append(f"figs/{f.name}")
    ok = not mismatched and compared > 0
    report(9, "manifest reruns are bit-exact", ok,
           f"{compared} files compared across {len(runs) + 1} runs, mismatches {mismatched or 'none'}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_gae_hand_check(report):
    adv, _ = compute_gae([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [False, False, True], gamma=0.99, lam=1.0,
                         terminals=[False, False, True])
    ok = adv.tolist() == [2.9701, 1.99, 1.0]
    report(10, "GAE hand-check", ok, f"advantages {adv.tolist()}")
    assert ok
