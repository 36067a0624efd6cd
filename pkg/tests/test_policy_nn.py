import math

import numpy as np
import pytest

from gradcheck import max_rel_error, numeric_grad
from mfcswarm.policy_nn import (
    LOG_STD_MIN,
    AdamState,
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


def zero_params(obs_dim=5, action_dim=3, hidden=(4,)):
    p = init_params(obs_dim, action_dim, hidden, seed=0)
    for k in p.arrays:
        p.arrays[k][...] = 0.0
    return p


def test_zero_network_outputs():
    p = zero_params()
    mean, log_std = forward_policy(p, np.ones((4, 5)))
    assert np.all(mean == 0) and np.all(log_std == 0)
    assert np.all(forward_value(p, np.ones((4, 5))) == 0)


def test_rows_are_independent():
    p = init_params(6, 4, (8, 8), seed=1)
    x = np.random.default_rng(0).normal(size=(10, 6))
    perm = np.random.default_rng(1).permutation(10)
    m1, _ = forward_policy(p, x)
    m2, _ = forward_policy(p, x[perm])
    np.testing.assert_array_equal(m1[perm], m2)


def test_outputs_finite_on_box_inputs():
    p = init_params(36, 144, (32, 32), seed=2)
    x = np.random.default_rng(0).uniform(-1, 1, size=(100, 36))
    assert np.all(np.isfinite(forward_policy(p, x)[0]))
    assert np.all(np.isfinite(forward_value(p, x)))


def test_init_is_seeded_and_small():
    a, b = init_params(36, 144, seed=4), init_params(36, 144, seed=4)
    for k in a.arrays:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])
    x = np.random.default_rng(0).uniform(-1, 1, size=(200, 36))
    assert np.abs(forward_policy(a, x)[0]).max() < 0.1
    for s in range(20):
        p = init_params(36, 144, (16,), seed=s)
        assert all(np.all(np.isfinite(v)) for v in p.arrays.values())


def test_obs_dim_checked():
    with pytest.raises(ValueError):
        forward_policy(init_params(5, 2, (4,), seed=0), np.zeros((1, 6)))


def test_linear_network_gradient_closed_form():
    # no hidden layers: mean = x W + b, loss = sum(mean * c)
    p = init_params(3, 2, (), seed=0)
    x = np.random.default_rng(0).normal(size=(7, 3))
    c = np.random.default_rng(1).normal(size=(7, 2))
    _, _, cache = forward_policy(p, x, return_cache=True)
    g = backward(p, cache, d_mean=c)
    np.testing.assert_allclose(g["pi.W0"], x.T @ c, atol=1e-12)
    np.testing.assert_allclose(g["pi.b0"], c.sum(axis=0), atol=1e-12)


def test_value_gradient_matches_finite_differences():
    p = init_params(3, 2, (4, 4), seed=3)
    x = np.random.default_rng(0).normal(size=(5, 3))
    y = np.random.default_rng(1).normal(size=5)

    def f(q):
        return float(np.sum((forward_value(q, x) - y) ** 2))

    v, acts = forward_value(p, x, return_cache=True)
    g = backward(p, None, value_acts=acts, d_value=2 * (v - y))
    num = numeric_grad(f, p)
    vf = {k: g[k] for k in g if k.startswith("vf.")}
    assert max_rel_error(vf, {k: num[k] for k in vf}) < 1e-4


def test_zero_upstream_gives_zero_gradient():
    p = init_params(3, 2, (4,), seed=0)
    x = np.ones((2, 3))
    _, _, cache = forward_policy(p, x, return_cache=True)
    _, acts = forward_value(p, x, return_cache=True)
    g = backward(p, cache, np.zeros((2, 2)), np.zeros((2, 2)), acts, np.zeros(2))
    assert all(np.all(v == 0) for v in g.values())


def test_log_prob_at_mean():
    assert gaussian_log_prob(np.array([0.0]), np.array([0.0]), np.array([0.0])) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_kl_identity_and_positivity():
    rng = np.random.default_rng(0)
    m, s = rng.normal(size=(20, 3)), rng.normal(scale=0.3, size=(20, 3))
    assert np.allclose(gaussian_kl(m, s, m, s), 0.0)
    assert np.all(gaussian_kl(m, s, m + 0.1, s - 0.2) > 0)


def test_sample_action_clips_and_keeps_raw_sample():
    draw = sample_action(np.full((1000, 2), 0.9), np.zeros((1000, 2)), seed=0)
    assert np.all(np.abs(draw.action) <= 1)
    assert np.any(np.abs(draw.sample) > 1)
    np.testing.assert_allclose(draw.log_prob, gaussian_log_prob(draw.sample, 0.9, np.zeros(2)))


def test_sample_action_monte_carlo_mean():
    mean = np.tile([0.5, -0.3], (100_000, 1))
    draw = sample_action(mean, np.full((100_000, 2), math.log(0.1)), seed=1)
    np.testing.assert_allclose(draw.action.mean(axis=0), [0.5, -0.3], atol=2e-3)


def test_degenerate_std_returns_clipped_mean():
    draw = sample_action(np.array([1.5, 0.2]), np.array([-50.0, -50.0]), seed=0)
    np.testing.assert_allclose(draw.action, [1.0, 0.2], atol=1e-8)
    # the log-std lower bound keeps the density finite
    assert np.isfinite(draw.log_prob)
    # density is evaluated at the floored std, so it is huge but bounded
    assert draw.log_prob <= -2 * LOG_STD_MIN - math.log(2 * math.pi) + 1e-9


def test_squash_midpoint_and_bounds():
    h = squash_to_mfc(np.zeros(144))
    np.testing.assert_array_equal(h.theta, 0.0)
    np.testing.assert_array_equal(h.sigma, 0.125)
    raw = np.zeros((36, 4))
    raw[:, 2] = 1.0
    raw[:, 3] = -1.0
    h = squash_to_mfc(raw.ravel())
    np.testing.assert_array_equal(h.sigma[:, 0], 0.25)
    np.testing.assert_array_equal(h.sigma[:, 1], 1e-3)


def test_squash_global_mode():
    h = squash_to_mfc(np.array([1.0, -1.0, 0.0, 0.0]), per_bin=False)
    assert h.is_global
    np.testing.assert_allclose(h.theta, [[0.2, -0.2]])
    with pytest.raises(ValueError):
        squash_to_mfc(np.zeros(144), per_bin=False)


def test_squash_movement_in_disc():
    u = squash_movement(np.array([[1.0, 1.0], [0.5, 0.0]]))
    assert np.linalg.norm(u[0]) == pytest.approx(0.2)
    np.testing.assert_allclose(u[1], [0.1, 0.0])


def test_adam_zero_gradient_is_noop():
    p = init_params(3, 2, (4,), seed=0)
    q, st = adam_update(p, {k: np.zeros_like(v) for k, v in p.arrays.items()}, AdamState.zeros_like(p), 1e-3)
    for k in p.arrays:
        np.testing.assert_array_equal(p.arrays[k], q.arrays[k])
    assert st.t == 1


def test_adam_first_step_size_is_lr():
    p = init_params(3, 2, (4,), seed=0)
    grads = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    grads["pi.b0"][0] = 3.7
    q, _ = adam_update(p, grads, AdamState.zeros_like(p), 1e-3)
    step = p.arrays["pi.b0"][0] - q.arrays["pi.b0"][0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_adam_deterministic():
    p = init_params(3, 2, (4,), seed=0)
    rng = np.random.default_rng(0)
    g = [{k: rng.normal(size=v.shape) for k, v in p.arrays.items()} for _ in range(3)]

    def run():
        q, st = p, AdamState.zeros_like(p)
        for gi in g:
            q, st = adam_update(q, gi, st, 1e-2)
        return q

    a, b = run(), run()
    for k in a.arrays:
        assert np.array_equal(a.arrays[k], b.arrays[k])


def test_adam_rejects_mismatched_grads():
    p = init_params(3, 2, (4,), seed=0)
    with pytest.raises(ValueError):
        adam_update(p, {"pi.W0": np.zeros((3, 4))}, AdamState.zeros_like(p), 1e-3)


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(36, 144, (8,), seed=0)
    st = AdamState.zeros_like(p)
    p, st = adam_update(p, {k: np.ones_like(v) for k, v in p.arrays.items()}, st, 1e-3)
    path = tmp_path / "c.npz"
    save_checkpoint(path, p, st, {"env": "aggregation"})
    ck = load_checkpoint(path)
    assert ck.metadata == {"env": "aggregation"}
    assert ck.optimizer.t == 1
    for k in p.arrays:
        assert np.array_equal(ck.params.arrays[k], p.arrays[k])
        assert np.array_equal(ck.optimizer.m[k], st.m[k])


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        load_checkpoint(path)
