import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factored_rl.core import ValidationError, flatten, to_dict, validate
from factored_rl.envs import (
    JaoSpec,
    SysadminSpec,
    build_jao_product,
    build_product_circle,
    build_sysadmin,
    cartesian_product,
    cycle_mdp,
    jao_mdp,
    random_fmdp,
    random_tabular,
    sysadmin_parents,
)
from factored_rl.solve import diameter, factored_span, solve_average_reward, span

from oracles import policy_gain


def test_circle4_counts(circle4):
    assert circle4.spec.m == 4 and circle4.num_actions == 5
    assert all(circle4.structure.transition_rows(i) == 20 for i in range(4))
    assert circle4.scope_bound == 20
    assert circle4.initial_state == circle4.num_states - 1  # all working
    assert not validate(circle4)


def test_circle_noop_all_working_fail_probability(circle4):
    # With every machine working the neighbour term vanishes.
    eps1 = np.random.default_rng(0).standard_normal(4)
    spec = circle4.spec
    x = spec.state_tuple(circle4.initial_state) + (4,)
    for i, f in enumerate(circle4.transitions):
        key = spec.scope_key([x[j] for j in f.scope], f.scope)
        assert f.table[key, 0] == pytest.approx(min(1.0, 0.1 * abs(eps1[i])), abs=1e-15)


def test_reboot_success(circle4):
    spec = circle4.spec
    for i, f in enumerate(circle4.transitions):
        for s in range(circle4.num_states):
            key = spec.scope_key([spec.pair(s, i)[j] for j in f.scope], f.scope)
            assert f.table[key, 1] == pytest.approx(0.95)


def test_failed_machine_stays_failed_often(circle4):
    spec = circle4.spec
    for i, f in enumerate(circle4.transitions):
        x = (0,) * 4 + (4,)
        key = spec.scope_key([x[j] for j in f.scope], f.scope)
        assert f.table[key, 0] >= 0.5


def test_three_leg_layout():
    assert sysadmin_parents("three-leg", 4) == [[], [0], [0], [0]]
    assert sysadmin_parents("three-leg", 7) == [[], [0], [1], [0], [3], [0], [5]]
    p = sysadmin_parents("three-leg", 8)
    assert sum(1 for q in p if q == [0]) == 3


def test_sysadmin_is_deterministic_in_seed():
    a = build_sysadmin(SysadminSpec("circle", 5, noise_seed=3))
    b = build_sysadmin(SysadminSpec("circle", 5, noise_seed=3))
    c = build_sysadmin(SysadminSpec("circle", 5, noise_seed=4))
    assert to_dict(a) == to_dict(b)
    assert to_dict(a) != to_dict(c)


def test_sysadmin_spec_validation():
    with pytest.raises(ValidationError):
        SysadminSpec("circle", 2)
    with pytest.raises(ValidationError):
        SysadminSpec("star", 4)
    with pytest.raises(ValidationError):
        SysadminSpec("circle", 4, alpha1=1.5)


def test_sysadmin_rewards_in_unit_interval(threeleg4):
    flat = flatten(threeleg4)
    assert flat.reward_mean.max() == pytest.approx(1.0)
    assert flat.reward_mean.min() == 0.0


def test_product_of_one_is_identity():
    comp = random_tabular(np.random.default_rng(0), 3, 2)
    flat = flatten(cartesian_product([comp], renormalize=False))
    assert np.allclose(flat.transition, comp.transition)
    assert np.allclose(flat.reward_mean, comp.reward_mean)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 3))
def test_product_gains_and_spans_add(seed, n):
    rng = np.random.default_rng(seed)
    comps = [random_tabular(rng, int(rng.integers(2, 4)), 2) for _ in range(n)]
    prod = cartesian_product(comps, renormalize=False)
    rep = solve_average_reward(flatten(prod), tol=1e-12)
    parts = [solve_average_reward(c, tol=1e-12) for c in comps]
    assert rep.gain == pytest.approx(sum(p.gain for p in parts), abs=1e-6)
    assert span(rep.bias) == pytest.approx(sum(span(p.bias) for p in parts), abs=1e-6)


def test_product_renormalizes():
    comps = [cycle_mdp(4), cycle_mdp(4)]
    flat = flatten(cartesian_product(comps))
    assert flat.reward_mean.max() == pytest.approx(1.0)


def test_product_circle_diameter_and_span():
    env = build_product_circle(2, 4)
    flat = flatten(env)
    assert math.isinf(diameter(flat).value)
    assert diameter(cycle_mdp(4)).value == pytest.approx(2.0)
    rep = solve_average_reward(flat, multichain=True)
    assert factored_span(rep.bias, env.spec.state_factor_sizes).q <= 4 + 1e-6


def test_product_circle_rejects_odd():
    with pytest.raises(ValidationError):
        build_product_circle(2, 5)


def test_jao_zero_epsilon_gain_half():
    mdp = jao_mdp(JaoSpec(1, 0.1, 0.0, 3))
    assert solve_average_reward(mdp, tol=1e-12).gain == pytest.approx(0.5, abs=1e-9)


def test_jao_good_action_better():
    mdp = jao_mdp(JaoSpec(1, 0.1, 0.05, 2))
    good = policy_gain(mdp.transition, mdp.reward_mean, np.array([1, 0]))
    bad = policy_gain(mdp.transition, mdp.reward_mean, np.array([0, 0]))
    assert good > bad
    assert good == pytest.approx(0.15 / 0.25)


def test_jao_product_spans():
    spec = JaoSpec(3, 0.1, 0.05, 2)
    env = build_jao_product(spec)
    assert not validate(env)
    single = solve_average_reward(jao_mdp(spec), tol=1e-12)
    rep = solve_average_reward(flatten(cartesian_product([jao_mdp(spec)] * 3, renormalize=False)), tol=1e-12)
    q = factored_span(rep.bias, env.spec.state_factor_sizes).q
    assert q == pytest.approx(3 * span(single.bias), abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_random_fmdp_is_valid(seed):
    mdp = random_fmdp(np.random.default_rng(seed), (2, 3, 2), (2, 2), max_parents=2)
    assert not validate(mdp)
