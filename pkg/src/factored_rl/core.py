"""Factored MDP representation, validation, flattening and sampling.

Conventions used throughout the package:

* Indices are 0-based. A state-action pair is a tuple of ``n`` components,
  the ``m`` state factors first, then the action components.
* Flat indices use mixed radix with the *first* component least
  significant. State ``(s_1, ..., s_m)`` maps to
  ``s_1 + S_1 * (s_2 + S_2 * (...))``; actions and scoped tuples follow the
  same rule over their own components.
* A scoped table for scope ``Z`` has one row per element of ``X[Z]``, keyed
  by the mixed-radix index of the scoped tuple.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DETERMINISTIC = 0
BERNOULLI = 1
GAUSSIAN = 2
REWARD_KINDS = {"deterministic": DETERMINISTIC, "bernoulli": BERNOULLI, "gaussian": GAUSSIAN}
_KIND_NAMES = {v: k for k, v in REWARD_KINDS.items()}

DEFAULT_FLATTEN_CAP = 2**20
PROB_TOL = 1e-9
GAUSSIAN_RETRIES = 16


class ValidationError(ValueError):
    """Raised when an object or input violates a structural invariant."""


class SizeError(ValueError):
    """Raised when an operation would exceed a configured size cap."""


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def mixed_radix_strides(sizes: Sequence[int]) -> np.ndarray:
    strides = np.ones(len(sizes), dtype=np.int64)
    for k in range(1, len(sizes)):
        strides[k] = strides[k - 1] * sizes[k - 1]
    return strides


def enumerate_tuples(sizes: Sequence[int]) -> np.ndarray:
    """All tuples over ``sizes`` as rows, ordered by mixed-radix index."""
    total = int(np.prod(sizes, dtype=np.int64)) if len(sizes) else 1
    idx = np.arange(total, dtype=np.int64)
    out = np.empty((total, len(sizes)), dtype=np.int64)
    for k, size in enumerate(sizes):
        out[:, k] = idx % size
        idx = idx // size
    return out


@dataclass(frozen=True)
class ScopeSet:
    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(i < 0 for i in idx):
            raise ValidationError(f"scope indices must be nonnegative: {idx}")
        if list(idx) != sorted(set(idx)):
            raise ValidationError(f"scope indices must be sorted and unique: {idx}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, indices: Iterable[int]) -> "ScopeSet":
        return cls(tuple(sorted(set(int(i) for i in indices))))

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


def scope_project(x: Sequence[int], scope: ScopeSet | Iterable[int]) -> tuple:
    """Return the sub-tuple of ``x`` at the scope's indices, in index order."""
    if not isinstance(scope, ScopeSet):
        scope = ScopeSet.of(scope)
    n = len(x)
    for i in scope:
        if i >= n:
            raise ValidationError(f"scope index {i} out of range for a {n}-component tuple")
    return tuple(x[i] for i in scope)


@dataclass(frozen=True, eq=False)
class FactorSpec:
    state_factor_sizes: tuple
    component_sizes: tuple
    action_component_indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "state_factor_sizes", tuple(int(v) for v in self.state_factor_sizes))
        object.__setattr__(self, "component_sizes", tuple(int(v) for v in self.component_sizes))
        object.__setattr__(
            self, "action_component_indices", tuple(int(v) for v in self.action_component_indices)
        )
        m, n = len(self.state_factor_sizes), len(self.component_sizes)
        if m < 1:
            raise ValidationError("need at least one state factor")
        if n < m:
            raise ValidationError("component list shorter than the state factor list")
        if any(v < 1 for v in self.component_sizes):
            raise ValidationError(f"component sizes must be positive: {self.component_sizes}")
        if self.component_sizes[:m] != self.state_factor_sizes:
            raise ValidationError("state factor sizes must equal the first m component sizes")
        if self.action_component_indices != tuple(range(m, n)):
            raise ValidationError(
                f"action components must be exactly indices {m}..{n - 1}, "
                f"got {self.action_component_indices}"
            )

    @classmethod
    def build(cls, state_sizes: Sequence[int], action_sizes: Sequence[int]) -> "FactorSpec":
        state_sizes = tuple(state_sizes)
        m = len(state_sizes)
        comps = state_sizes + tuple(action_sizes)
        return cls(state_sizes, comps, tuple(range(m, len(comps))))

    @property
    def m(self) -> int:
        return len(self.state_factor_sizes)

    @property
    def n(self) -> int:
        return len(self.component_sizes)

    @property
    def action_sizes(self) -> tuple:
        return self.component_sizes[self.m :]

    @property
    def num_states(self) -> int:
        return math.prod(self.state_factor_sizes)

    @property
    def num_actions(self) -> int:
        return math.prod(self.action_sizes)

    @property
    def max_factor_size(self) -> int:
        return max(self.state_factor_sizes)

    def scope_sizes(self, scope: ScopeSet) -> tuple:
        return tuple(self.component_sizes[i] for i in scope)

    def scope_size(self, scope: ScopeSet) -> int:
        return math.prod(self.scope_sizes(scope))

    def scope_key(self, scoped: Sequence[int], scope: ScopeSet) -> int:
        sizes = self.scope_sizes(scope)
        if len(scoped) != len(sizes):
            raise ValidationError(f"scoped tuple {tuple(scoped)} does not match scope {scope.indices}")
        key = 0
        for v, size in zip(reversed(tuple(scoped)), reversed(sizes)):
            if not 0 <= v < size:
                raise ValidationError(f"value {v} outside [0, {size})")
            key = key * size + int(v)
        return key

    def key_tuple(self, key: int, scope: ScopeSet) -> tuple:
        out = []
        for size in self.scope_sizes(scope):
            out.append(int(key % size))
            key //= size
        return tuple(out)

    def state_index(self, state: Sequence[int]) -> int:
        return self._index(state, self.state_factor_sizes, "state")

    def action_index(self, action: Sequence[int]) -> int:
        return self._index(action, self.action_sizes, "action")

    @staticmethod
    def _index(values, sizes, what):
        if len(values) != len(sizes):
            raise ValidationError(f"{what} tuple {tuple(values)} has wrong length (want {len(sizes)})")
        idx = 0
        for v, size in zip(reversed(tuple(values)), reversed(sizes)):
            if not 0 <= v < size:
                raise ValidationError(f"{what} component {v} outside [0, {size})")
            idx = idx * size + int(v)
        return idx

    def state_tuple(self, s: int) -> tuple:
        return tuple(int(v) for v in self.state_table[s])

    def action_tuple(self, a: int) -> tuple:
        return tuple(int(v) for v in self.action_table[a])

    def pair(self, s: int, a: int) -> tuple:
        return self.state_tuple(s) + self.action_tuple(a)

    @cached_property
    def state_table(self) -> np.ndarray:
        return enumerate_tuples(self.state_factor_sizes)

    @cached_property
    def action_table(self) -> np.ndarray:
        return enumerate_tuples(self.action_sizes)

    def keys(self, scope: ScopeSet) -> np.ndarray:
        """Scoped key of every flat pair, shape ``(S, A)``."""
        cache = self.__dict__.setdefault("_key_cache", {})
        if scope.indices not in cache:
            m = self.m
            S, A = self.num_states, self.num_actions
            keys = np.zeros((S, A), dtype=np.int64)
            stride = 1
            for i in scope:
                if i < m:
                    keys += (self.state_table[:, i] * stride)[:, None]
                else:
                    keys += (self.action_table[:, i - m] * stride)[None, :]
                stride *= self.component_sizes[i]
            keys.flags.writeable = False
            cache[scope.indices] = keys
        return cache[scope.indices]


@dataclass(frozen=True, eq=False)
class TransitionFactor:
    scope: ScopeSet
    table: np.ndarray  # (|X[Z]|, S_i)

    def __post_init__(self):
        if not isinstance(self.scope, ScopeSet):
            object.__setattr__(self, "scope", ScopeSet.of(self.scope))
        object.__setattr__(self, "table", _frozen(np.atleast_2d(self.table)))


@dataclass(frozen=True, eq=False)
class RewardFactor:
    scope: ScopeSet
    mean: np.ndarray  # (|X[Z]|,)
    kind: np.ndarray = None
    sigma: np.ndarray = None

    def __post_init__(self):
        if not isinstance(self.scope, ScopeSet):
            object.__setattr__(self, "scope", ScopeSet.of(self.scope))
        mean = _frozen(np.atleast_1d(self.mean))
        object.__setattr__(self, "mean", mean)
        kind = np.zeros(mean.shape, dtype=np.int64) if self.kind is None else self.kind
        sigma = np.zeros(mean.shape) if self.sigma is None else self.sigma
        kind = np.broadcast_to(np.asarray(kind, dtype=np.int64), mean.shape)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), mean.shape)
        object.__setattr__(self, "kind", _frozen(kind, np.int64))
        object.__setattr__(self, "sigma", _frozen(sigma))

    @property
    def max_mean(self) -> float:
        return float(self.mean.max()) if self.mean.size else 0.0


@dataclass(frozen=True, eq=False)
class Structure:
    """The known graph of an FMDP: factor sizes and scopes, no parameters."""

    spec: FactorSpec
    transition_scopes: tuple
    reward_scopes: tuple

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def l(self) -> int:
        return len(self.reward_scopes)

    def transition_rows(self, i: int) -> int:
        return self.spec.scope_size(self.transition_scopes[i])

    def reward_rows(self, i: int) -> int:
        return self.spec.scope_size(self.reward_scopes[i])

    @property
    def scope_bound(self) -> int:
        sizes = [self.spec.scope_size(z) for z in self.transition_scopes + self.reward_scopes]
        return max(sizes)

    def transition_keys(self) -> np.ndarray:
        return np.stack([self.spec.keys(z) for z in self.transition_scopes])

    def reward_keys(self) -> np.ndarray:
        if not self.reward_scopes:
            return np.zeros((0, self.spec.num_states, self.spec.num_actions), dtype=np.int64)
        return np.stack([self.spec.keys(z) for z in self.reward_scopes])


@dataclass(frozen=True, eq=False)
class FactoredMdp:
    spec: FactorSpec
    transitions: tuple
    rewards: tuple
    initial_state: int = 0
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "rewards", tuple(self.rewards))
        if len(self.transitions) != self.spec.m:
            raise ValidationError(
                f"expected {self.spec.m} transition factors, got {len(self.transitions)}"
            )

    @property
    def num_states(self) -> int:
        return self.spec.num_states

    @property
    def num_actions(self) -> int:
        return self.spec.num_actions

    @property
    def num_reward_factors(self) -> int:
        return len(self.rewards)

    @property
    def scope_bound(self) -> int:
        """L: the largest scoped table over transition and reward factors."""
        sizes = [self.spec.scope_size(f.scope) for f in self.transitions]
        sizes += [self.spec.scope_size(f.scope) for f in self.rewards]
        return max(sizes)

    @cached_property
    def structure(self) -> Structure:
        return Structure(
            self.spec,
            tuple(f.scope for f in self.transitions),
            tuple(f.scope for f in self.rewards),
        )

    def transition_keys(self, i: int) -> np.ndarray:
        return self.spec.keys(self.transitions[i].scope)

    def reward_keys(self, i: int) -> np.ndarray:
        return self.spec.keys(self.rewards[i].scope)

    def with_tables(self, transitions=None, rewards=None, name=None) -> "FactoredMdp":
        return FactoredMdp(
            self.spec,
            self.transitions if transitions is None else transitions,
            self.rewards if rewards is None else rewards,
            initial_state=self.initial_state,
            name=self.name if name is None else name,
            meta=dict(self.meta),
        )


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transition: np.ndarray  # (S, A, S)
    reward_mean: np.ndarray  # (S, A)

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward_mean)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise ValidationError(f"inconsistent shapes: P {P.shape}, R {R.shape}")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward_mean", R)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def problems(self, tol: float = PROB_TOL) -> list:
        out = []
        if (self.transition < -tol).any():
            out.append("negative transition probability")
        bad = np.argwhere(np.abs(self.transition.sum(axis=2) - 1.0) > tol)
        out += [f"row (s={s}, a={a}) does not sum to 1" for s, a in bad[:10]]
        if (self.reward_mean < -tol).any() or (self.reward_mean > 1 + tol).any():
            out.append("reward mean outside [0, 1]")
        return out


def joint_transition_prob(mdp: FactoredMdp, x: Sequence[int], s_next: Sequence[int]) -> float:
    """Product over factors of ``P_i(s'[i] | x[Z_i])``."""
    spec = mdp.spec
    if len(x) != spec.n:
        raise ValidationError(f"state-action tuple must have {spec.n} components")
    spec.state_index(s_next)
    spec.state_index(x[: spec.m])
    spec.action_index(x[spec.m :])
    prob = 1.0
    for i, factor in enumerate(mdp.transitions):
        key = spec.scope_key(scope_project(x, factor.scope), factor.scope)
        prob *= float(factor.table[key, s_next[i]])
    return prob


def flatten(mdp: FactoredMdp, cap: int = DEFAULT_FLATTEN_CAP) -> TabularMdp:
    """Enumerate the factored model into dense ``(S, A, S)`` / ``(S, A)`` arrays."""
    spec = mdp.spec
    S, A = spec.num_states, spec.num_actions
    if S * A * S > cap:
        raise SizeError(f"flattened transition tensor has {S * A * S} entries, cap is {cap}")
    P = np.ones((S, A, S))
    comps = spec.state_table
    for i, factor in enumerate(mdp.transitions):
        rows = factor.table[mdp.transition_keys(i)]  # (S, A, S_i)
        P *= rows[:, :, comps[:, i]]
    R = np.zeros((S, A))
    for j, factor in enumerate(mdp.rewards):
        R += factor.mean[mdp.reward_keys(j)]
    return TabularMdp(P, R)


def validate(mdp: FactoredMdp) -> list:
    """Return a list of human-readable invariant violations (empty when valid)."""
    spec = mdp.spec
    out = []
    n = spec.n

    def check_scope(kind, i, scope):
        bad = [z for z in scope if z >= n]
        if bad:
            out.append(f"{kind} factor {i}: scope index {bad[0]} out of range (n={n})")
            return False
        return True

    for i, factor in enumerate(mdp.transitions):
        if not check_scope("transition", i, factor.scope):
            continue
        rows = spec.scope_size(factor.scope)
        width = spec.state_factor_sizes[i]
        if factor.table.shape != (rows, width):
            out.append(
                f"transition factor {i}: table shape {factor.table.shape}, expected {(rows, width)}"
            )
            continue
        for key in np.argwhere((factor.table < -PROB_TOL).any(axis=1)).ravel():
            out.append(f"transition factor {i}, row {_key_label(spec, factor.scope, key)}: negative entry")
        sums = factor.table.sum(axis=1)
        for key in np.argwhere(np.abs(sums - 1.0) > PROB_TOL).ravel():
            out.append(
                f"transition factor {i}, row {_key_label(spec, factor.scope, key)}: "
                f"sums to {sums[key]:.12g}"
            )
    total_max = 0.0
    for j, factor in enumerate(mdp.rewards):
        if not check_scope("reward", j, factor.scope):
            continue
        rows = spec.scope_size(factor.scope)
        if factor.mean.shape != (rows,):
            out.append(f"reward factor {j}: table has {factor.mean.shape} entries, expected {rows}")
            continue
        for key in np.argwhere((factor.mean < -PROB_TOL) | (factor.mean > 1 + PROB_TOL)).ravel():
            out.append(f"reward factor {j}, row {_key_label(spec, factor.scope, key)}: mean outside [0, 1]")
        for key in np.argwhere(~np.isin(factor.kind, list(_KIND_NAMES))).ravel():
            out.append(f"reward factor {j}, row {_key_label(spec, factor.scope, key)}: unknown kind")
        total_max += _reward_upper(factor)
    if total_max > 1 + PROB_TOL:
        out.append(f"sum of per-factor maximum rewards is {total_max:.6g} > 1")
    if not 0 <= mdp.initial_state < spec.num_states:
        out.append(f"initial state {mdp.initial_state} out of range")
    return out


def _reward_upper(factor: RewardFactor) -> float:
    # Bernoulli and truncated-Gaussian draws can reach 1 whenever the mean is positive.
    upper = np.where(
        (factor.kind == DETERMINISTIC) | (factor.mean <= 0), factor.mean, 1.0
    )
    return float(upper.max()) if upper.size else 0.0


def _key_label(spec, scope, key):
    return ",".join(str(v) for v in spec.key_tuple(int(key), scope))


def require_valid(mdp: FactoredMdp) -> FactoredMdp:
    problems = validate(mdp)
    if problems:
        raise ValidationError("; ".join(problems[:5]))
    return mdp


def sample_reward(mean, kind, sigma, u, normals):
    """Draw one reward component. ``normals`` supplies Gaussian retries."""
    if kind == DETERMINISTIC:
        return float(mean)
    if kind == BERNOULLI:
        return 1.0 if u < mean else 0.0
    r = mean
    for z in normals:
        r = mean + sigma * z
        if 0.0 <= r <= 1.0:
            return float(r)
    return float(min(1.0, max(0.0, r)))


def sample_step(mdp: FactoredMdp, s, a, rng: np.random.Generator):
    """One environment transition.

    Returns ``(reward_components, total_reward, next_state)`` with the next
    state as a flat index.
    """
    spec = mdp.spec
    s = spec.state_index(s) if not np.isscalar(s) else int(s)
    a = spec.action_index(a) if not np.isscalar(a) else int(a)
    comps = np.empty(spec.m, dtype=np.int64)
    for i, factor in enumerate(mdp.transitions):
        row = factor.table[mdp.transition_keys(i)[s, a]]
        comps[i] = min(int(np.searchsorted(np.cumsum(row), rng.random(), side="right")), row.size - 1)
    rewards = np.empty(len(mdp.rewards))
    for j, factor in enumerate(mdp.rewards):
        key = mdp.reward_keys(j)[s, a]
        rewards[j] = sample_reward(
            factor.mean[key], factor.kind[key], factor.sigma[key],
            rng.random(), rng.standard_normal(GAUSSIAN_RETRIES),
        )
    return rewards, float(rewards.sum()), spec.state_index(comps)


# --- file format -----------------------------------------------------------


def to_dict(mdp: FactoredMdp) -> dict:
    spec = mdp.spec

    def keyed(scope, values):
        return {
            ",".join(str(v) for v in spec.key_tuple(k, scope)): values(k)
            for k in range(spec.scope_size(scope))
        }

    def reward_entry(f, k):
        if f.kind[k] == DETERMINISTIC:
            return float(f.mean[k])
        entry = {"mean": float(f.mean[k]), "kind": _KIND_NAMES[int(f.kind[k])]}
        if f.kind[k] == GAUSSIAN:
            entry["sigma"] = float(f.sigma[k])
        return entry

    out = {
        "state_factor_sizes": list(spec.state_factor_sizes),
        "component_sizes": list(spec.component_sizes),
        "action_component_indices": list(spec.action_component_indices),
        "transition": [
            {"scope": list(f.scope), "table": keyed(f.scope, lambda k, f=f: [float(p) for p in f.table[k]])}
            for f in mdp.transitions
        ],
        "reward": [
            {"scope": list(f.scope), "table": keyed(f.scope, lambda k, f=f: reward_entry(f, k))}
            for f in mdp.rewards
        ],
        "initial_state": int(mdp.initial_state),
    }
    if mdp.name:
        out["name"] = mdp.name
    if mdp.meta:
        out["meta"] = mdp.meta
    return out


def from_dict(data: dict) -> FactoredMdp:
    try:
        spec = FactorSpec(
            data["state_factor_sizes"], data["component_sizes"], data["action_component_indices"]
        )
    except KeyError as exc:
        raise ValidationError(f"missing field {exc}") from None
    n = spec.n

    def parse_table(i, kind, scope, table, width):
        if any(z >= n for z in scope):
            raise ValidationError(f"{kind} factor {i}: scope index out of range (n={n})")
        rows = spec.scope_size(scope)
        out = [None] * rows
        for label, value in table.items():
            parts = tuple(int(p) for p in label.split(",")) if label != "" else ()
            key = spec.scope_key(parts, scope)
            out[key] = value
        missing = [spec.key_tuple(k, scope) for k, v in enumerate(out) if v is None]
        if missing:
            raise ValidationError(f"{kind} factor {i}: table misses key {missing[0]}")
        return out

    transitions = []
    for i, item in enumerate(data.get("transition", [])):
        scope = ScopeSet.of(item["scope"])
        rows = parse_table(i, "transition", scope, item["table"], None)
        transitions.append(TransitionFactor(scope, np.array(rows, dtype=float)))
    rewards = []
    for j, item in enumerate(data.get("reward", [])):
        scope = ScopeSet.of(item["scope"])
        rows = parse_table(j, "reward", scope, item["table"], None)
        means, kinds, sigmas = [], [], []
        for entry in rows:
            if isinstance(entry, dict):
                kind = entry.get("kind", "deterministic")
                if kind not in REWARD_KINDS:
                    raise ValidationError(f"reward factor {j}: unknown kind {kind!r}")
                means.append(float(entry["mean"]))
                kinds.append(REWARD_KINDS[kind])
                sigmas.append(float(entry.get("sigma", 0.0)))
            else:
                means.append(float(entry))
                kinds.append(DETERMINISTIC)
                sigmas.append(0.0)
        rewards.append(RewardFactor(scope, means, kinds, sigmas))
    return FactoredMdp(
        spec, transitions, rewards,
        initial_state=int(data.get("initial_state", 0)),
        name=data.get("name", ""),
        meta=data.get("meta", {}),
    )


def save(mdp: FactoredMdp, path) -> None:
    Path(path).write_text(json.dumps(to_dict(mdp), indent=1))


def load(path) -> FactoredMdp:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return from_dict(data)
