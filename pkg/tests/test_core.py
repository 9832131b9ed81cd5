import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factored_rl.core import (
    BERNOULLI,
    GAUSSIAN,
    FactoredMdp,
    FactorSpec,
    RewardFactor,
    ScopeSet,
    SizeError,
    TransitionFactor,
    ValidationError,
    enumerate_tuples,
    flatten,
    from_dict,
    joint_transition_prob,
    load,
    sample_reward,
    sample_step,
    save,
    scope_project,
    to_dict,
    validate,
)
from factored_rl.envs import random_fmdp


def test_scope_project_picks_indices_in_order():
    assert scope_project((4, 5, 6, 7), ScopeSet.of([3, 1])) == (5, 7)
    assert scope_project((4, 5), []) == ()


def test_scope_project_rejects_out_of_range():
    with pytest.raises(ValidationError):
        scope_project((1, 2), [2])


def test_scope_set_requires_sorted_unique():
    with pytest.raises(ValidationError):
        ScopeSet((2, 1))
    with pytest.raises(ValidationError):
        ScopeSet((1, 1))


def test_factor_spec_action_components_must_follow_states():
    with pytest.raises(ValidationError):
        FactorSpec((2, 2), (2, 2, 3), (1,))
    spec = FactorSpec.build((2, 3), (4,))
    assert spec.m == 2 and spec.n == 3
    assert spec.num_states == 6 and spec.num_actions == 4


def test_mixed_radix_first_component_least_significant():
    spec = FactorSpec.build((2, 3), (2,))
    assert spec.state_index((1, 0)) == 1
    assert spec.state_index((0, 1)) == 2
    assert spec.state_tuple(5) == (1, 2)
    rows = enumerate_tuples((2, 3))
    assert [spec.state_index(r) for r in rows] == list(range(6))


def test_keys_match_scope_key(rng):
    mdp = random_fmdp(rng, (2, 3, 2), (2,), max_parents=2)
    spec = mdp.spec
    for i, f in enumerate(mdp.transitions):
        keys = mdp.transition_keys(i)
        for s in range(spec.num_states):
            for a in range(spec.num_actions):
                x = spec.pair(s, a)
                assert keys[s, a] == spec.scope_key(scope_project(x, f.scope), f.scope)


def test_joint_probability_sums_to_one(rng):
    mdp = random_fmdp(rng, (2, 3), (2,), max_parents=1)
    spec = mdp.spec
    for s, a in [(0, 0), (5, 1), (3, 0)]:
        x = spec.pair(s, a)
        total = sum(joint_transition_prob(mdp, x, spec.state_tuple(sn)) for sn in range(spec.num_states))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_flatten_matches_joint_probability(rng):
    mdp = random_fmdp(rng, (3, 2, 2), (2, 2), max_parents=2)
    flat = flatten(mdp)
    spec = mdp.spec
    for s in range(spec.num_states):
        for a in range(spec.num_actions):
            x = spec.pair(s, a)
            for sn in range(spec.num_states):
                assert flat.transition[s, a, sn] == pytest.approx(
                    joint_transition_prob(mdp, x, spec.state_tuple(sn)), abs=1e-14
                )
    assert not flat.problems()


def test_flatten_size_cap(rng):
    mdp = random_fmdp(rng, (2, 2, 2), (2,))
    with pytest.raises(SizeError):
        flatten(mdp, cap=10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.integers(2, 3), min_size=1, max_size=3), st.integers(1, 3))
def test_flatten_rows_are_distributions(seed, sizes, actions):
    mdp = random_fmdp(np.random.default_rng(seed), sizes, (actions,), max_parents=2)
    flat = flatten(mdp)
    assert np.allclose(flat.transition.sum(axis=2), 1.0, atol=1e-12)
    assert (flat.reward_mean >= 0).all() and (flat.reward_mean <= 1 + 1e-12).all()


def test_validate_reports_bad_row_with_key():
    spec = FactorSpec.build((2,), (2,))
    bad = FactoredMdp(
        spec,
        [TransitionFactor(ScopeSet.of([0, 1]), [[0.5, 0.5], [0.7, 0.2], [1, 0], [0, 1]])],
        [RewardFactor(ScopeSet.of([0]), [0.1, 0.2])],
    )
    problems = validate(bad)
    assert len(problems) == 1
    assert "row 1,0" in problems[0] and "0.9" in problems[0]


def test_validate_reward_total_bound():
    spec = FactorSpec.build((2,), (1,))
    mdp = FactoredMdp(
        spec,
        [TransitionFactor(ScopeSet.of([0]), [[1, 0], [0, 1]])],
        [RewardFactor(ScopeSet.of([0]), [0.6, 0.6]), RewardFactor(ScopeSet.of([0]), [0.5, 0.5])],
    )
    assert any("sum of per-factor maximum rewards" in p for p in validate(mdp))


def test_validate_scope_out_of_range():
    spec = FactorSpec.build((2,), (1,))
    mdp = FactoredMdp(
        spec, [TransitionFactor(ScopeSet.of([0, 5]), [[1, 0]])], [RewardFactor(ScopeSet.of([0]), [0, 0])]
    )
    assert any("out of range" in p for p in validate(mdp))


def test_round_trip_file(tmp_path, rng):
    mdp = random_fmdp(rng, (2, 3), (2,), max_parents=1)
    mdp = mdp.with_tables(rewards=[
        RewardFactor(mdp.rewards[0].scope, mdp.rewards[0].mean, BERNOULLI),
        RewardFactor(mdp.rewards[1].scope, mdp.rewards[1].mean, GAUSSIAN, 0.1),
    ])
    path = tmp_path / "m.json"
    save(mdp, path)
    again = load(path)
    assert to_dict(again) == to_dict(mdp)
    data = json.loads(path.read_text())
    assert set(data) >= {"state_factor_sizes", "component_sizes", "action_component_indices", "transition", "reward"}


def test_load_reports_line_of_syntax_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "state_factor_sizes": [2],\n oops\n}')
    with pytest.raises(ValidationError, match="line 3"):
        load(path)


def test_missing_table_key_is_rejected(rng):
    data = to_dict(random_fmdp(rng, (2,), (2,)))
    data["transition"][0]["table"].pop("0,0")
    with pytest.raises(ValidationError, match="misses key"):
        from_dict(data)


def test_sample_reward_kinds():
    assert sample_reward(0.3, 0, 0.0, 0.9, []) == 0.3
    assert sample_reward(0.3, BERNOULLI, 0.0, 0.2, []) == 1.0
    assert sample_reward(0.3, BERNOULLI, 0.0, 0.5, []) == 0.0
    assert sample_reward(0.5, GAUSSIAN, 0.1, 0.0, [100.0, 1.0]) == pytest.approx(0.6)
    assert sample_reward(0.5, GAUSSIAN, 0.1, 0.0, [100.0, 100.0]) == 1.0


def test_sample_step_empirical_frequencies(rng):
    mdp = random_fmdp(rng, (2, 2), (2,), max_parents=1)
    flat = flatten(mdp)
    counts = np.zeros(mdp.num_states)
    n = 20000
    for _ in range(n):
        _, _, sn = sample_step(mdp, 1, 1, rng)
        counts[sn] += 1
    p = flat.transition[1, 1]
    sigma = np.sqrt(p * (1 - p) / n)
    assert (np.abs(counts / n - p) <= 4 * sigma + 1e-12).all()
