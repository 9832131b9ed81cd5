"""Visit counting, empirical estimates and confidence widths."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import FactoredMdp, RewardFactor, Structure, TransitionFactor, ValidationError

DEFAULT_C_P = 18.0
DEFAULT_C_R = 12.0


class VisitStatistics:
    """Online counts over every transition and reward scope.

    Tables are padded to common shapes so the rollout kernel can update them
    in place: ``counts_p[i, key, v]`` counts next value ``v`` of factor ``i``
    after visiting scoped pair ``key``; ``counts_r`` / ``sums_r`` hold the
    reward-scope visit counts and reward sums. ``t`` is the index of the next
    step (one more than the number of recorded steps).
    """

    def __init__(self, structure: Structure):
        self.structure = structure
        spec = structure.spec
        self.p_rows = np.array([structure.transition_rows(i) for i in range(structure.m)], dtype=np.int64)
        self.r_rows = np.array([structure.reward_rows(j) for j in range(structure.l)], dtype=np.int64)
        self.sizes = np.array(spec.state_factor_sizes, dtype=np.int64)
        kp = int(self.p_rows.max())
        kr = int(self.r_rows.max()) if structure.l else 1
        self.counts_p = np.zeros((structure.m, kp, int(self.sizes.max())), dtype=np.int64)
        self.counts_r = np.zeros((structure.l, kr), dtype=np.int64)
        self.sums_r = np.zeros((structure.l, kr))
        self.t = 1
        self.keys_p = structure.transition_keys()
        self.keys_r = structure.reward_keys()

    @classmethod
    def for_mdp(cls, mdp: FactoredMdp) -> "VisitStatistics":
        return cls(mdp.structure)

    @property
    def counts_x(self) -> np.ndarray:
        """Visits to each transition-scope pair, shape ``(m, K)``."""
        return self.counts_p.sum(axis=2)

    def record(self, s: int, a: int, rewards, s_next: int) -> None:
        """Record one transition given flat state/action indices."""
        spec = self.structure.spec
        nxt = spec.state_table[s_next]
        for i in range(self.structure.m):
            self.counts_p[i, self.keys_p[i, s, a], nxt[i]] += 1
        rewards = np.atleast_1d(np.asarray(rewards, dtype=float))
        if rewards.size != self.structure.l:
            raise ValidationError(f"expected {self.structure.l} reward components")
        for j in range(self.structure.l):
            key = self.keys_r[j, s, a]
            self.counts_r[j, key] += 1
            self.sums_r[j, key] += rewards[j]
        self.t += 1

    def copy(self) -> "VisitStatistics":
        out = object.__new__(VisitStatistics)
        out.__dict__.update(self.__dict__)
        out.counts_p = self.counts_p.copy()
        out.counts_r = self.counts_r.copy()
        out.sums_r = self.sums_r.copy()
        return out

    def transition_counts(self, i: int) -> np.ndarray:
        """``N_{P_i}(s, x)`` as a ``(|X[Z_i]|, S_i)`` array."""
        return self.counts_p[i, : self.p_rows[i], : self.sizes[i]]

    def reward_counts(self, j: int) -> np.ndarray:
        return self.counts_r[j, : self.r_rows[j]]


def record_step(stats: VisitStatistics, x, rewards, s_next) -> VisitStatistics:
    """Record a step given component tuples; returns ``stats`` for chaining."""
    spec = stats.structure.spec
    s = spec.state_index(tuple(x[: spec.m]))
    a = spec.action_index(tuple(x[spec.m :]))
    sn = s_next if np.isscalar(s_next) else spec.state_index(tuple(s_next))
    stats.record(s, a, rewards, int(sn))
    return stats


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    structure: Structure
    p_hat: tuple  # per factor (|X[Z_i^P]|, S_i)
    r_hat: tuple  # per reward factor (|X[Z_i^R]|,)

    def to_fmdp(self, name: str = "empirical") -> FactoredMdp:
        st = self.structure
        return FactoredMdp(
            st.spec,
            [TransitionFactor(z, p) for z, p in zip(st.transition_scopes, self.p_hat)],
            [RewardFactor(z, r) for z, r in zip(st.reward_scopes, self.r_hat)],
            name=name,
        )


def empirical_model(stats: VisitStatistics) -> EmpiricalModel:
    st = stats.structure
    p_hat = []
    for i in range(st.m):
        counts = stats.transition_counts(i).astype(float)
        n = counts.sum(axis=1, keepdims=True)
        p = np.where(n > 0, counts / np.maximum(n, 1.0), 1.0 / counts.shape[1])
        p_hat.append(p)
    r_hat = []
    for j in range(st.l):
        n = stats.reward_counts(j)
        r_hat.append(stats.sums_r[j, : stats.r_rows[j]] / np.maximum(n, 1))
    return EmpiricalModel(st, tuple(p_hat), tuple(r_hat))


# --- widths --------------------------------------------------------------------


def _log_term(value: float) -> float:
    # Clamped at zero so that degenerate parameters give zero rather than NaN widths.
    return max(math.log(value), 0.0)


def transition_log(structure: Structure, i: int, rho: float, t_k: int) -> float:
    """log(c_{i,k}) with ``c_{i,k} = 6 m S_i |X[Z_i^P]| t_k / rho``."""
    s_i = structure.spec.state_factor_sizes[i]
    return _log_term(6.0 * structure.m * s_i * structure.transition_rows(i) * t_k / rho)


def reward_log(structure: Structure, i: int, rho: float, t_k: int) -> float:
    return _log_term(6.0 * structure.l * structure.reward_rows(i) * t_k / rho)


def reward_width(stats, i, x, rho, t_k, c_r=DEFAULT_C_R) -> float:
    """Hoeffding-style width for reward factor ``i`` at scoped key ``x``."""
    n = max(int(stats.reward_counts(i)[x]), 1)
    return math.sqrt(c_r * reward_log(stats.structure, i, rho, t_k) / n)


def _transition_raw(p_hat, n, log_c, c_p):
    n = np.maximum(n, 1)
    return np.sqrt(c_p * p_hat * log_c / n) + c_p * log_c / n


def transition_width(stats, i, s, x, rho, t_k, c_p=DEFAULT_C_P) -> float:
    """Capped per-entry width for ``P_i(s | x)``."""
    p_hat = float(empirical_model(stats).p_hat[i][x, s])
    n = int(stats.transition_counts(i)[x].sum())
    raw = float(_transition_raw(p_hat, n, transition_log(stats.structure, i, rho, t_k), c_p))
    return min(raw, p_hat)


def l1_width(stats, i, x, rho, t_k, c_p=DEFAULT_C_P) -> float:
    s_i = stats.structure.spec.state_factor_sizes[i]
    n = max(int(stats.transition_counts(i)[x].sum()), 1)
    return 2.0 * math.sqrt(c_p * s_i * transition_log(stats.structure, i, rho, t_k) / n)


@dataclass(frozen=True, eq=False)
class WidthTables:
    p: tuple  # capped W_{P_i}(s|x), per factor (|X[Z_i]|, S_i)
    p_raw: tuple  # the concentration bound before the cap at P_hat
    p_l1: tuple  # per factor (|X[Z_i]|,)
    r: tuple  # per reward factor (|X[Z_i^R]|,)
    rho: float
    t_k: int
    c_p: float
    c_r: float


def compute_widths(
    stats: VisitStatistics,
    rho: float,
    t_k: int | None = None,
    c_p: float = DEFAULT_C_P,
    c_r: float = DEFAULT_C_R,
    model: EmpiricalModel | None = None,
) -> WidthTables:
    """All widths for the current counts, evaluated at episode start ``t_k``."""
    st = stats.structure
    t_k = stats.t if t_k is None else t_k
    model = empirical_model(stats) if model is None else model
    p, p_raw, p_l1, r = [], [], [], []
    for i in range(st.m):
        n = stats.transition_counts(i).sum(axis=1)[:, None]
        log_c = transition_log(st, i, rho, t_k)
        raw = _transition_raw(model.p_hat[i], n, log_c, c_p)
        p_raw.append(raw)
        p.append(np.minimum(raw, model.p_hat[i]))
        s_i = st.spec.state_factor_sizes[i]
        p_l1.append(2.0 * np.sqrt(c_p * s_i * log_c / np.maximum(n[:, 0], 1)))
    for j in range(st.l):
        n = np.maximum(stats.reward_counts(j), 1)
        r.append(np.sqrt(c_r * reward_log(st, j, rho, t_k) / n))
    return WidthTables(tuple(p), tuple(p_raw), tuple(p_l1), tuple(r), rho, t_k, c_p, c_r)


@dataclass(frozen=True)
class Violation:
    kind: str  # "reward" or "transition"
    factor: int
    key: int
    outcome: int | None
    deviation: float
    width: float


@dataclass(frozen=True)
class MembershipReport:
    inside: bool
    min_slack: float
    violations: tuple

    def __bool__(self):
        return self.inside


def in_confidence_set(
    true_model: FactoredMdp, model: EmpiricalModel, widths: WidthTables, tol: float = 1e-12
) -> MembershipReport:
    """Check that the true parameters lie within the widths of the estimates.

    Transition entries are checked against the uncapped concentration bound.
    Against the capped width this is the same lower-side condition
    ``P >= P_hat - W`` that the optimistic construction relies on, while an
    outcome not yet observed (``P_hat = 0``) is not counted as a miss.
    """
    st = model.structure
    if len(true_model.transitions) != st.m or len(true_model.rewards) != st.l:
        raise ValidationError("true model and estimates have different factor counts")
    violations = []
    min_slack = math.inf
    for j, factor in enumerate(true_model.rewards):
        if factor.scope != st.reward_scopes[j]:
            raise ValidationError(f"reward factor {j}: scope mismatch")
        dev = np.abs(factor.mean - model.r_hat[j])
        slack = widths.r[j] - dev
        min_slack = min(min_slack, float(slack.min()))
        for key in np.flatnonzero(slack < -tol):
            violations.append(Violation("reward", j, int(key), None, float(dev[key]), float(widths.r[j][key])))
    for i, factor in enumerate(true_model.transitions):
        if factor.scope != st.transition_scopes[i]:
            raise ValidationError(f"transition factor {i}: scope mismatch")
        dev = np.abs(factor.table - model.p_hat[i])
        slack = widths.p_raw[i] - dev
        min_slack = min(min_slack, float(slack.min()))
        for key, s in np.argwhere(slack < -tol):
            violations.append(
                Violation("transition", i, int(key), int(s), float(dev[key, s]), float(widths.p_raw[i][key, s]))
            )
    return MembershipReport(not violations, min_slack, tuple(violations))
