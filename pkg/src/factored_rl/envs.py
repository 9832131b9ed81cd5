"""Benchmark environments.

Sysadmin networks (circle and three-leg), Cartesian products of tabular
MDPs, the two-cycle product with infinite diameter, products of two-state
JAO chains, and random FMDPs for property tests.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    DEFAULT_FLATTEN_CAP,
    FactoredMdp,
    FactorSpec,
    RewardFactor,
    ScopeSet,
    SizeError,
    TabularMdp,
    TransitionFactor,
    ValidationError,
    enumerate_tuples,
    flatten,
    require_valid,
)

log = logging.getLogger(__name__)

DIAMETER_CHECK_MAX_FACTORS = 7


# --- sysadmin ------------------------------------------------------------------


@dataclass(frozen=True)
class SysadminSpec:
    topology: str = "circle"  # "circle" or "three-leg"
    size: int = 4
    alpha1: float = 0.1
    alpha2: float = 0.1
    reboot_success: float = 0.95
    noise_seed: int = 0

    def __post_init__(self):
        if self.topology not in ("circle", "three-leg"):
            raise ValidationError(f"unknown topology {self.topology!r}")
        if self.topology == "circle" and self.size < 3:
            raise ValidationError("a circle needs at least 3 machines")
        if self.topology == "three-leg" and self.size < 4:
            raise ValidationError("a three-leg network needs at least 4 machines")
        for name in ("alpha1", "alpha2", "reboot_success"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")


def sysadmin_parents(topology: str, size: int) -> list:
    """In-neighbours of every machine (self excluded)."""
    if topology == "circle":
        return [[(i - 1) % size] for i in range(size)]
    # Hub 0; the other machines form three legs, as equal as possible, earlier legs longer.
    parents = [[]]
    rest = size - 1
    lengths = [rest // 3 + (1 if k < rest % 3 else 0) for k in range(3)]
    node = 1
    for length in lengths:
        prev = 0
        for _ in range(length):
            parents.append([prev])
            prev = node
            node += 1
    return parents


def build_sysadmin(spec: SysadminSpec, check_diameter: bool = True) -> FactoredMdp:
    """Binary machines (1 = working); one action component: reboot machine i, or noop = m."""
    m = spec.size
    rng = np.random.default_rng(spec.noise_seed)
    eps1 = rng.standard_normal(m)
    eps0 = rng.standard_normal(m)
    eta1 = rng.standard_normal((m, m))
    eta0 = rng.standard_normal((m, m))
    parents = sysadmin_parents(spec.topology, m)
    fspec = FactorSpec.build((2,) * m, (m + 1,))
    action = m  # component index of the action
    transitions = []
    for i in range(m):
        scope = ScopeSet.of([i, action] + parents[i])
        sizes = fspec.scope_sizes(scope)
        table = np.empty((fspec.scope_size(scope), 2))
        for key, values in enumerate(enumerate_tuples(sizes)):
            comp = dict(zip(scope.indices, values))
            failed = [j for j in parents[i] if comp[j] == 0]
            if comp[action] == i:
                p_work = spec.reboot_success
            elif comp[i] == 1:
                p_fail = spec.alpha1 * abs(eps1[i]) + sum(spec.alpha2 * abs(eta1[i, j]) for j in failed)
                p_work = 1.0 - min(1.0, p_fail)
            else:
                p_stay = max(abs(eps0[i]), 0.5) + sum(spec.alpha2 * abs(eta0[i, j]) for j in failed)
                p_work = 1.0 - min(1.0, p_stay)
            table[key] = (1.0 - p_work, p_work)
        transitions.append(TransitionFactor(scope, table))
    rewards = [RewardFactor(ScopeSet.of([i]), np.array([0.0, 1.0 / m])) for i in range(m)]
    mdp = FactoredMdp(
        fspec, transitions, rewards,
        initial_state=fspec.state_index((1,) * m),
        name=f"{spec.topology}-{m}",
        meta={"topology": spec.topology, "size": m, "noise_seed": spec.noise_seed},
    )
    require_valid(mdp)
    if check_diameter and m <= DIAMETER_CHECK_MAX_FACTORS:
        from .solve import diameter

        d = diameter(flatten(mdp)).value
        log.info("%s: diameter %.6g", mdp.name, d)
        if math.isinf(d):
            raise ValidationError(f"{mdp.name} has an infinite diameter")
    return mdp


# --- products ------------------------------------------------------------------


def cartesian_product(
    components: Sequence[TabularMdp],
    renormalize: bool = True,
    cap: int = DEFAULT_FLATTEN_CAP,
    name: str = "product",
) -> FactoredMdp:
    """Independent MDPs run side by side, one state factor and one action component each."""
    components = list(components)
    if not components:
        raise ValidationError("need at least one component")
    n = len(components)
    state_sizes = tuple(c.num_states for c in components)
    action_sizes = tuple(c.num_actions for c in components)
    if math.prod(state_sizes) * math.prod(action_sizes) > cap:
        raise SizeError(f"product has {math.prod(state_sizes)} states x {math.prod(action_sizes)} actions")
    spec = FactorSpec.build(state_sizes, action_sizes)
    scale = 1.0 / n if renormalize else 1.0
    transitions, rewards = [], []
    for i, comp in enumerate(components):
        scope = ScopeSet.of([i, n + i])
        S_i, A_i = comp.num_states, comp.num_actions
        # key = s_i + S_i * a_i
        table = np.transpose(comp.transition, (1, 0, 2)).reshape(A_i * S_i, S_i)
        transitions.append(TransitionFactor(scope, table))
        rewards.append(RewardFactor(scope, scale * comp.reward_mean.T.reshape(A_i * S_i)))
    return FactoredMdp(spec, transitions, rewards, name=name, meta={"renormalized": renormalize})


def cycle_mdp(cycle_len: int) -> TabularMdp:
    """Deterministic cycle: action 0 steps forward, action 1 backward; reward 1 in state 0."""
    P = np.zeros((cycle_len, 2, cycle_len))
    for s in range(cycle_len):
        P[s, 0, (s + 1) % cycle_len] = 1.0
        P[s, 1, (s - 1) % cycle_len] = 1.0
    R = np.zeros((cycle_len, 2))
    R[0] = 1.0
    return TabularMdp(P, R)


def build_product_circle(copies: int = 2, cycle_len: int = 4, renormalize: bool = True) -> FactoredMdp:
    if cycle_len < 4 or cycle_len % 2:
        raise ValidationError("cycle_len must be even and at least 4")
    if copies < 1:
        raise ValidationError("need at least one copy")
    return cartesian_product(
        [cycle_mdp(cycle_len)] * copies, renormalize, name=f"product-circle-{copies}x{cycle_len}"
    )


@dataclass(frozen=True)
class JaoSpec:
    copies: int = 1
    delta: float = 0.1
    epsilon: float = 0.05
    actions: int = 2
    good_action: int = -1  # index of the better action; -1 means the last one

    def __post_init__(self):
        if self.copies < 1 or self.actions < 1:
            raise ValidationError("copies and actions must be positive")
        if not self.delta > 0 or self.epsilon < 0 or self.delta + self.epsilon > 1:
            raise ValidationError("need delta > 0, epsilon >= 0 and delta + epsilon <= 1")
        if not -self.actions <= self.good_action < self.actions:
            raise ValidationError("good_action out of range")


def jao_mdp(spec: JaoSpec) -> TabularMdp:
    A = spec.actions
    good = spec.good_action % A
    P = np.zeros((2, A, 2))
    up = np.full(A, spec.delta)
    up[good] += spec.epsilon
    P[0, :, 1] = up
    P[0, :, 0] = 1.0 - up
    P[1, :, 0] = spec.delta
    P[1, :, 1] = 1.0 - spec.delta
    R = np.zeros((2, A))
    R[1] = 1.0
    return TabularMdp(P, R)


def build_jao_product(spec: JaoSpec, renormalize: bool = True) -> FactoredMdp:
    return cartesian_product([jao_mdp(spec)] * spec.copies, renormalize, name=f"jao-{spec.copies}")


# --- random instances --------------------------------------------------------


def random_tabular(rng: np.random.Generator, num_states: int, num_actions: int, sparsity: float = 0.0) -> TabularMdp:
    """Random MDP; with ``sparsity > 0`` each row keeps a random support (never empty)."""
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    if sparsity > 0:
        keep = rng.random(P.shape) >= sparsity
        keep[np.arange(num_states)[:, None], np.arange(num_actions)[None, :],
             rng.integers(num_states, size=(num_states, num_actions))] = True
        P = np.where(keep, P, 0.0)
        P /= P.sum(axis=2, keepdims=True)
    return TabularMdp(P, rng.random((num_states, num_actions)))


def random_fmdp(
    rng: np.random.Generator,
    state_sizes: Sequence[int],
    action_sizes: Sequence[int],
    max_parents: int = 1,
    reward_factors: int | None = None,
    concentration: float = 1.0,
) -> FactoredMdp:
    """Random FMDP: factor ``i`` depends on itself, up to ``max_parents`` other
    state factors and all action components. Reward factor ``j`` depends on
    state factor ``j`` and the actions; total reward stays in ``[0, 1]``."""
    spec = FactorSpec.build(tuple(state_sizes), tuple(action_sizes))
    m, n = spec.m, spec.n
    actions = list(range(m, n))
    transitions = []
    for i in range(m):
        others = [j for j in range(m) if j != i]
        k = int(rng.integers(0, min(max_parents, len(others)) + 1))
        parents = list(rng.choice(others, size=k, replace=False)) if k else []
        scope = ScopeSet.of([i] + parents + actions)
        rows = spec.scope_size(scope)
        table = rng.dirichlet(np.full(spec.state_factor_sizes[i], concentration), size=rows)
        transitions.append(TransitionFactor(scope, table))
    l = m if reward_factors is None else reward_factors
    rewards = []
    for j in range(l):
        scope = ScopeSet.of([j % m] + actions)
        rewards.append(RewardFactor(scope, rng.random(spec.scope_size(scope)) / l))
    return FactoredMdp(spec, transitions, rewards, name="random")
