"""The compiled loop kernels and the numpy kernels must agree exactly."""

import numpy as np
import pytest

from factored_rl import _accel, kernels
from factored_rl.agents import env_arrays
from factored_rl.confidence import VisitStatistics, compute_widths, empirical_model
from factored_rl.core import GAUSSIAN, GAUSSIAN_RETRIES, RewardFactor
from factored_rl.envs import SysadminSpec, build_sysadmin, random_fmdp
from factored_rl.extended import build_extended


def _simulate_both(env, steps, seed):
    arr = env_arrays(env)
    rng = np.random.default_rng(seed)
    m, l = arr.keys_p.shape[0], arr.keys_r.shape[0]
    u_p, u_r = rng.random((steps, m)), rng.random((steps, l))
    z_r = rng.standard_normal((steps, l, GAUSSIAN_RETRIES))
    policy = rng.integers(env.num_actions, size=env.num_states).astype(np.int64)
    outs = []
    for fn in (kernels._simulate_loop, kernels._simulate_numpy):
        stats = VisitStatistics.for_mdp(env)
        rewards, states = np.empty(steps), np.empty(steps, dtype=np.int64)
        final = fn(np.int64(env.initial_state), policy, arr.keys_p, arr.cum_p, arr.sizes_p, arr.strides,
                   arr.keys_r, arr.r_mean, arr.r_kind, arr.r_sigma, u_p, u_r, z_r,
                   stats.counts_p, stats.counts_r, stats.sums_r, rewards, states)
        outs.append((int(final), rewards, states, stats))
    return outs


def test_simulate_loop_and_numpy_agree_on_sysadmin():
    (f1, r1, s1, st1), (f2, r2, s2, st2) = _simulate_both(build_sysadmin(SysadminSpec("circle", 4)), 3000, 0)
    assert f1 == f2
    assert np.array_equal(s1, s2) and np.array_equal(r1, r2)
    assert np.array_equal(st1.counts_p, st2.counts_p)
    assert np.array_equal(st1.counts_r, st2.counts_r)


def test_simulate_agree_with_stochastic_rewards():
    rng = np.random.default_rng(4)
    env = random_fmdp(rng, (2, 3), (2,), max_parents=1)
    env = env.with_tables(rewards=[
        RewardFactor(env.rewards[0].scope, env.rewards[0].mean, GAUSSIAN, 0.3),
        RewardFactor(env.rewards[1].scope, env.rewards[1].mean, 1),
    ])
    (f1, r1, s1, st1), (f2, r2, s2, st2) = _simulate_both(env, 2000, 1)
    assert np.array_equal(s1, s2)
    assert np.array_equal(r1, r2)
    assert np.array_equal(st1.sums_r, st2.sums_r)
    assert ((r1 >= 0) & (r1 <= 2)).all()


def _extended_inputs(seed):
    rng = np.random.default_rng(seed)
    env = random_fmdp(rng, (2, 3, 2), (2,), max_parents=2)
    stats = VisitStatistics.for_mdp(env)
    stats.counts_p[...] = rng.integers(0, 50, size=stats.counts_p.shape)
    model = empirical_model(stats)
    ext = build_extended(model, compute_widths(stats, 0.05, 100, 0.2, 0.2, model))
    sizes = np.array(env.spec.state_factor_sizes, dtype=np.int64)
    h = rng.normal(size=env.num_states)
    return ext, sizes, h, rng


@pytest.mark.parametrize("seed", range(4))
def test_extended_backup_forms_agree(seed):
    ext, sizes, h, _ = _extended_inputs(seed)
    S, A = ext.reward.shape
    best_l = np.empty(S)
    arg_l = np.empty(S, dtype=np.int64)
    kernels._extended_backup_loop(h, 0.5, ext.keys_p, ext.base, ext.wsum, sizes, ext.reward, best_l, arg_l)
    e = kernels._extended_expectations_numpy(h, ext.keys_p, ext.base, ext.wsum, sizes)
    q = np.swapaxes(ext.reward[:, :, None] + 0.5 * e, 1, 2).reshape(S, S * A)
    assert np.allclose(best_l, q.max(axis=1), atol=1e-12)
    assert np.allclose(q[np.arange(S), arg_l], q.max(axis=1), atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_extended_evaluate_forms_agree(seed):
    ext, sizes, h, rng = _extended_inputs(seed)
    S, A = ext.reward.shape
    policy = rng.integers(S * A, size=S).astype(np.int64)
    out = np.empty(S)
    kernels._extended_evaluate_loop(h, 0.5, ext.keys_p, ext.base, ext.wsum, sizes, ext.reward, policy, out)
    ref = kernels._extended_evaluate_numpy(h, 0.5, ext.keys_p, ext.base, ext.wsum, sizes, ext.reward, policy)
    assert np.allclose(out, ref, atol=1e-12)
    # and against the explicit next-state rows
    rows = np.array([ext.transition_row(s, policy[s]) for s in range(S)])
    direct = ext.reward[np.arange(S), policy % A] + 0.5 * rows @ h
    assert np.allclose(ref, direct, atol=1e-12)


def test_flag_reflects_environment():
    assert isinstance(_accel.USE_NUMBA, bool)
    if not _accel.HAVE_NUMBA:
        assert not _accel.USE_NUMBA
