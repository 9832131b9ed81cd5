import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factored_rl.agents import (
    AgentConfig,
    _project_simplex,
    env_arrays,
    frmax_model,
    fsrl_episode,
    known_mask,
    make_schedule,
    rollout,
    run_agent,
    sample_posterior,
    visit_ratio_bound,
    visit_ratio_sum,
)
from factored_rl.confidence import VisitStatistics, empirical_model
from factored_rl.core import SizeError, ValidationError, flatten
from factored_rl.envs import random_fmdp
from factored_rl.solve import solve_average_reward


def test_schedule_by_hand():
    s = make_schedule(2, 10)
    assert s.lengths.tolist() == [1, 1, 2, 2, 3, 1]
    assert s.starts.tolist() == [0, 1, 2, 4, 6, 9]
    assert make_schedule(1, 0).K == 0


def test_schedule_episode_count_for_circle4():
    # L = 20, T = 1e5: 19 full blocks (lengths 1..19) cover 3800 * 19 / 2 ... checked by brute force
    lengths, t, k = [], 0, 1
    while t < 10**5:
        step = min(math.ceil(k / 20), 10**5 - t)
        lengths.append(step)
        t += step
        k += 1
    assert make_schedule(20, 10**5).lengths.tolist() == lengths


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(100, 10**6))
def test_schedule_properties(L, T):
    # For very short horizons a single step already exceeds sqrt(3T/L).
    s = make_schedule(L, T)
    assert int(s.lengths.sum()) == T
    assert s.K <= math.sqrt(3 * L * T)
    assert s.max_length <= math.sqrt(3 * T / L)
    k = np.arange(1, s.K + 1)
    assert (s.lengths[:-1] == np.ceil(k[:-1] / L)).all()


def test_schedule_validation():
    with pytest.raises(ValidationError):
        make_schedule(0, 10)


def test_config_validation():
    with pytest.raises(ValidationError):
        AgentConfig("ucrl")
    with pytest.raises(ValidationError):
        AgentConfig(rho=0.0)
    with pytest.raises(ValidationError):
        AgentConfig(c=-1.0)
    assert AgentConfig().width_coefficients == (18.0, 12.0)
    assert AgentConfig(c=0.03).width_coefficients == (0.03, 0.03)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_project_simplex_is_the_projection(seed, n):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(3, n))
    p = _project_simplex(v)
    assert np.allclose(p.sum(axis=1), 1.0) and (p >= 0).all()
    # optimality: v - p is constant on the support and no larger off it
    for row_v, row_p in zip(v, p):
        d = row_v - row_p
        sup = row_p > 1e-12
        assert np.allclose(d[sup], d[sup][0], atol=1e-10)
        assert (d[~sup] <= d[sup][0] + 1e-10).all()


def _small_env(seed=0):
    return random_fmdp(np.random.default_rng(seed), (2, 2), (2,), max_parents=1)


def test_rollout_counts_consistent():
    env = _small_env()
    stats = VisitStatistics.for_mdp(env)
    policy = np.zeros(env.num_states, dtype=np.int64)
    r, s, final = rollout(env_arrays(env), stats, 0, policy, 500, np.random.default_rng(0))
    assert stats.t == 501
    assert stats.counts_p.sum() == 500 * env.spec.m
    assert r.shape == (500,) and s[0] == 0


def test_posterior_concentrates_with_small_c():
    env = _small_env()
    stats = VisitStatistics.for_mdp(env)
    rollout(env_arrays(env), stats, 0, np.zeros(4, dtype=np.int64), 5000, np.random.default_rng(1))
    model = empirical_model(stats)
    sample = sample_posterior(stats, 1e-4, np.random.default_rng(2))
    for i in range(env.spec.m):
        visited = stats.transition_counts(i).sum(axis=1) > 100
        assert np.allclose(sample.transitions[i].table[visited], model.p_hat[i][visited], atol=1e-2)
    for j, f in enumerate(sample.rewards):
        assert ((f.mean >= 0) & (f.mean <= 1)).all()


def test_posterior_mean_matches_dirichlet():
    env = _small_env()
    stats = VisitStatistics.for_mdp(env)
    stats.counts_p[0, 0, :2] = [3, 1]
    rng = np.random.default_rng(0)
    draws = np.array([sample_posterior(stats, 1.0, rng).transitions[0].table[0] for _ in range(4000)])
    assert draws.mean(axis=0) == pytest.approx([4 / 6, 2 / 6], abs=0.02)


def test_frmax_model_unknown_pairs_absorb():
    env = _small_env()
    stats = VisitStatistics.for_mdp(env)
    model = frmax_model(stats, 10)
    S = env.num_states
    assert not known_mask(stats, 10).any()
    assert np.allclose(model.transition[:S, :, S], 1.0)
    assert solve_average_reward(model, multichain=True).gain == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("kind", ["dorl", "psrl", "frmax", "fsrl"])
def test_agents_run_and_are_reproducible(kind):
    env = _small_env(3)
    cfg = AgentConfig(kind, c=0.1 if kind != "frmax" else None, m_known=20, candidates=16)
    a = run_agent(env, cfg, 400, seed=5)
    b = run_agent(env, cfg, 400, seed=5)
    assert np.array_equal(a.rewards, b.rewards) and np.array_equal(a.actions, b.actions)
    assert a.planner_failures == 0
    assert a.T == 400 and np.isfinite(a.planner_gains).all()


def test_env_stream_independent_of_agent():
    # Two agents with the same seed see the same first-step environment draw.
    env = _small_env(4)
    a = run_agent(env, AgentConfig("psrl", c=0.5), 1, seed=9)
    b = run_agent(env, AgentConfig("psrl", c=0.5), 1, seed=9)
    assert a.states[0] == b.states[0] == env.initial_state


def test_dorl_optimistic_gain_above_true():
    env = _small_env(5)
    rec = run_agent(env, AgentConfig("dorl"), 300, seed=0)
    true_gain = solve_average_reward(flatten(env)).gain
    assert (rec.planner_gains >= true_gain - 1e-6).all()


def test_fsrl_budget_zero_falls_back_to_empirical():
    env = _small_env(6)
    stats = VisitStatistics.for_mdp(env)
    res = fsrl_episode(stats, 1, AgentConfig("fsrl", budget=-1.0, candidates=4), np.random.default_rng(0))
    assert res.policy.shape == (env.num_states,)


def test_fsrl_size_limit():
    env = random_fmdp(np.random.default_rng(0), (2,) * 6, (20,))
    with pytest.raises(SizeError):
        fsrl_episode(VisitStatistics.for_mdp(env), 1, AgentConfig("fsrl"), np.random.default_rng(0))


def test_confidence_tracking_records_every_episode():
    env = _small_env(7)
    rec = run_agent(env, AgentConfig("psrl", track_confidence=True), 200, seed=1)
    assert rec.in_confidence.shape == (rec.schedule.K,)


def test_visit_ratio_bound_on_short_run():
    env = _small_env(8)
    rec = run_agent(env, AgentConfig("psrl"), 2000, seed=2)
    bound = visit_ratio_bound(rec.schedule)
    for i, f in enumerate(env.transitions):
        assert visit_ratio_sum(rec, env, f.scope) <= bound


CHILD = """
import json, sys
import numpy as np
from factored_rl import _accel
from factored_rl.agents import AgentConfig, run_agent
from factored_rl.envs import SysadminSpec, build_sysadmin
env = build_sysadmin(SysadminSpec("circle", 4))
psrl = run_agent(env, AgentConfig("psrl", c=0.75), 3000, seed=11)
dorl = run_agent(env, AgentConfig("dorl", c=0.03), 400, seed=11)
print(json.dumps({"numba": _accel.USE_NUMBA, "rewards": psrl.rewards.tolist(), "actions": psrl.actions.tolist(),
                  "dorl_gains": dorl.planner_gains[:40].tolist()}))
"""


def test_numba_and_numpy_paths_give_the_same_run():
    outs = {}
    for flag in ("1", "0"):
        env = dict(os.environ, FRL_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", CHILD], env=env, capture_output=True, text=True, check=True)
        outs[flag] = json.loads(proc.stdout.strip().splitlines()[-1])
    assert outs["0"]["numba"] is False
    # Same planner inputs and the same random numbers: identical trajectories.
    assert outs["1"]["actions"] == outs["0"]["actions"]
    assert outs["1"]["rewards"] == outs["0"]["rewards"]
    # The two extended backups sum in different orders, so near-ties may later
    # resolve differently; early planned gains still agree to solver tolerance.
    assert np.allclose(outs["1"]["dorl_gains"], outs["0"]["dorl_gains"], atol=1e-7)
