"""The optimistic extended FMDP built from extreme transition dynamics.

Every base action is paired with a target state. Factor ``i`` of the
extended model moves the whole width ``W_{P_i}`` of its estimated row onto
the target's ``i``-th component. The extended action set is ``A x S``; as
a flat index the extended action is ``a + A * target``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .confidence import EmpiricalModel, WidthTables
from .core import (
    FactoredMdp,
    FactorSpec,
    RewardFactor,
    ScopeSet,
    TransitionFactor,
    ValidationError,
    flatten,
)
from .solve import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
    GainBias,
    SolveReport,
    diameter,
    factored_span,
    relative_value_iteration,
    solve_average_reward,
)

WIDTH_SLACK = 1e-12
DEFAULT_SWEEPS = 10


class ConstructionError(ValueError):
    """Raised when widths cannot produce valid extreme dynamics."""


def extreme_dynamic(p_hat, w, target: int) -> np.ndarray:
    """``p_hat - w`` with the removed mass ``sum(w)`` placed on ``target``."""
    p_hat = np.asarray(p_hat, dtype=float)
    w = np.asarray(w, dtype=float)
    if p_hat.shape != w.shape or p_hat.ndim != 1:
        raise ConstructionError(f"shape mismatch: {p_hat.shape} vs {w.shape}")
    if not 0 <= target < p_hat.size:
        raise ConstructionError(f"target {target} outside [0, {p_hat.size})")
    if (w < -WIDTH_SLACK).any() or (w > p_hat + WIDTH_SLACK).any():
        raise ConstructionError("width must satisfy 0 <= w <= p_hat componentwise")
    out = np.clip(p_hat - w, 0.0, None)
    out[target] += w.sum()
    return out


def _kron_row(rows) -> np.ndarray:
    """Joint law of independent factors, flat with factor 1 least significant."""
    out = np.ones(1)
    for row in rows:
        out = np.kron(row, out)
    return out


@dataclass(frozen=True, eq=False)
class ExtendedFmdp:
    base_spec: FactorSpec
    model: FactoredMdp  # the extended model, action components = base actions + m targets
    base: np.ndarray  # (m, Kmax, Wmax) padded rows of p_hat - w
    wsum: np.ndarray  # (m, Kmax) total width per scoped row
    keys_p: np.ndarray  # (m, S, A) base transition keys
    reward: np.ndarray  # (S, A) optimistic reward, independent of the target
    scope_sizes: dict = field(default_factory=dict)

    @property
    def num_states(self) -> int:
        return self.base_spec.num_states

    @property
    def num_base_actions(self) -> int:
        return self.base_spec.num_actions

    @property
    def num_actions(self) -> int:
        return self.num_base_actions * self.num_states

    def split_action(self, ext_action: int) -> tuple:
        """Flat extended action to ``(base action, target state)``."""
        return ext_action % self.num_base_actions, ext_action // self.num_base_actions

    def join_action(self, action: int, target: int) -> int:
        return action + self.num_base_actions * target

    def transition_row(self, s: int, ext_action: int) -> np.ndarray:
        """Next-state law of one extended pair, length ``S``."""
        a, t = self.split_action(ext_action)
        tgt = self.base_spec.state_table[t]
        rows = []
        for i, size in enumerate(self.base_spec.state_factor_sizes):
            key = self.keys_p[i, s, a]
            row = self.base[i, key, :size].copy()
            row[tgt[i]] += self.wsum[i, key]
            rows.append(row)
        return _kron_row(rows)


def build_extended(model: EmpiricalModel, widths: WidthTables, spec: FactorSpec | None = None) -> ExtendedFmdp:
    structure = model.structure
    spec = structure.spec if spec is None else spec
    if spec.component_sizes != structure.spec.component_sizes:
        raise ValidationError("spec does not match the estimates")
    m, n = spec.m, spec.n
    sizes = spec.state_factor_sizes
    ext_spec = FactorSpec.build(sizes, spec.action_sizes + sizes)
    L = structure.scope_bound
    W = spec.max_factor_size

    p_rows = [structure.transition_rows(i) for i in range(m)]
    base = np.zeros((m, max(p_rows), W))
    wsum = np.zeros((m, max(p_rows)))
    transitions, scope_sizes = [], {"transition": [], "reward": [], "bound": L * W}
    for i in range(m):
        p_hat, w = model.p_hat[i], widths.p[i]
        if p_hat.shape != w.shape:
            raise ConstructionError(f"factor {i}: width table shape {w.shape} != {p_hat.shape}")
        if (w < -WIDTH_SLACK).any() or (w > p_hat + WIDTH_SLACK).any():
            raise ConstructionError(f"factor {i}: widths must satisfy 0 <= W <= P_hat")
        lower = np.clip(p_hat - w, 0.0, None)
        total = w.sum(axis=1)
        base[i, : p_rows[i], : sizes[i]] = lower
        wsum[i, : p_rows[i]] = total
        # Target component n + i is the last scope index, so its stride is |X[Z_i]|.
        table = np.repeat(lower[None], sizes[i], axis=0)  # (target, key, value)
        table[np.arange(sizes[i]), :, np.arange(sizes[i])] += total[None, :]
        table = table.reshape(sizes[i] * p_rows[i], sizes[i])
        scope = ScopeSet.of(tuple(structure.transition_scopes[i]) + (n + i,))
        transitions.append(TransitionFactor(scope, table))
        scope_sizes["transition"].append(ext_spec.scope_size(scope))

    rewards = []
    S, A = spec.num_states, spec.num_actions
    reward = np.zeros((S, A))
    for j in range(structure.l):
        mean = model.r_hat[j] + widths.r[j]
        scope = structure.reward_scopes[j]
        rewards.append(RewardFactor(scope, mean))
        scope_sizes["reward"].append(ext_spec.scope_size(scope))
        reward += mean[spec.keys(scope)]
    ext = FactoredMdp(ext_spec, transitions, rewards, name="extended")
    keys_p = np.ascontiguousarray(structure.transition_keys())
    return ExtendedFmdp(spec, ext, base, wsum, keys_p, reward, scope_sizes)


def scope_sizes_ok(ext: ExtendedFmdp) -> bool:
    bound = ext.scope_sizes["bound"]
    return all(v <= bound for v in ext.scope_sizes["transition"] + ext.scope_sizes["reward"])


def map_policy(ext_policy, num_base_actions: int) -> np.ndarray:
    """Project an extended policy onto base actions."""
    return np.asarray(ext_policy, dtype=np.int64) % num_base_actions


def extended_backup(ext: ExtendedFmdp):
    sizes = np.array(ext.base_spec.state_factor_sizes, dtype=np.int64)

    def backup(v, coef):
        return kernels.extended_backup(
            np.ascontiguousarray(v, dtype=float), coef, ext.keys_p, ext.base, ext.wsum, sizes, ext.reward
        )

    return backup


def extended_evaluate(ext: ExtendedFmdp):
    sizes = np.array(ext.base_spec.state_factor_sizes, dtype=np.int64)

    def evaluate(v, coef, policy):
        return kernels.extended_evaluate(
            np.ascontiguousarray(v, dtype=float), coef, ext.keys_p, ext.base, ext.wsum, sizes,
            ext.reward, np.ascontiguousarray(policy, dtype=np.int64),
        )

    return evaluate


def solve_extended(
    ext: ExtendedFmdp,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    init=None,
    sweeps: int = DEFAULT_SWEEPS,
    multichain: bool = False,
) -> SolveReport:
    """Optimal extended policy by relative value iteration over ``A x S``.

    Full backups are interleaved with ``sweeps`` cheap fixed-policy sweeps.
    """
    gain, bias, policy, residual, iters = relative_value_iteration(
        extended_backup(ext), ext.num_states, tol, max_iters, init,
        multichain=multichain, evaluate=extended_evaluate(ext), sweeps=sweeps,
    )
    return SolveReport(GainBias(gain, bias, residual), policy.astype(np.int64), iters)


def solve_extended_flat(ext: ExtendedFmdp, tol: float = DEFAULT_TOL) -> SolveReport:
    """Same optimum through the dense flattened extended model."""
    return solve_average_reward(flatten(ext.model), tol=tol)


# --- optimism and diameter predicates ----------------------------------------


@dataclass(frozen=True, eq=False)
class PredicateResult:
    ok: bool
    worst: float  # smallest component of (P_ext - P) h
    difference: np.ndarray
    targets: np.ndarray


def _argmax_target(h) -> int:
    return int(np.argmax(np.asarray(h)))  # lowest index on ties


def _true_rows(true_m: FactoredMdp, s: int, a: int) -> list:
    return [f.table[true_m.transition_keys(i)[s, a]] for i, f in enumerate(true_m.transitions)]


def sequential_targets(true_m: FactoredMdp, ext: ExtendedFmdp, h, policy) -> np.ndarray:
    """Per-state targets chosen factor by factor, last factor first.

    Factor ``i``'s target maximizes the expectation of ``h`` with earlier
    factors at their true laws and later factors at their chosen extreme
    laws. Each replacement can only increase the expectation, so the
    resulting extended row dominates the true row on ``h``.
    """
    spec = ext.base_spec
    sizes = spec.state_factor_sizes
    m = spec.m
    grid_h = np.asarray(h, dtype=float).reshape(tuple(reversed(sizes)))
    out = np.empty(spec.num_states, dtype=np.int64)
    for s in range(spec.num_states):
        a = int(policy[s])
        true_rows = _true_rows(true_m, s, a)
        g = grid_h
        target = [0] * m
        for i in reversed(range(m)):
            # g has axes (factor i, ..., factor 1); later factors are already eliminated.
            vals = _marginal_over_earlier(g, true_rows[:i])
            t_i = int(np.argmax(vals))
            target[i] = t_i
            key = ext.keys_p[i, s, a]
            row = ext.base[i, key, : sizes[i]].copy()
            row[t_i] += ext.wsum[i, key]
            g = np.tensordot(row, g, axes=([0], [0]))  # eliminate factor i with its extreme law
        out[s] = spec.state_index(target)
    return out


def _marginal_over_earlier(g, earlier_rows):
    """E over factors ``1..len(earlier_rows)`` of ``g`` whose axis 0 is the current factor."""
    out = g
    for row in earlier_rows:
        out = out @ row  # last axis is factor 1, then factor 2, ...
    return np.atleast_1d(out)


def optimism_predicate(
    true_m: FactoredMdp,
    ext: ExtendedFmdp,
    h,
    policy,
    targets=None,
    tol: float = 1e-9,
) -> PredicateResult:
    """Check ``(P(ext, pi_ext) - P(true, pi)) h >= -tol`` componentwise.

    ``pi_ext(s) = (pi(s), target(s))``. By default every state uses the
    single target ``argmax h``.
    """
    h = np.asarray(h, dtype=float)
    S = ext.num_states
    policy = np.asarray(policy, dtype=np.int64)
    if targets is None:
        targets = np.full(S, _argmax_target(h), dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    diff = np.empty(S)
    for s in range(S):
        a = int(policy[s])
        p_ext = ext.transition_row(s, ext.join_action(a, int(targets[s])))
        p_true = _kron_row(_true_rows(true_m, s, a))
        diff[s] = (p_ext - p_true) @ h
    worst = float(diff.min())
    return PredicateResult(worst >= -tol, worst, diff, targets)


@dataclass(frozen=True)
class DiameterComparison:
    ok: bool
    extended: float
    true: float


def extended_diameter_predicate(
    true_m: FactoredMdp, ext: ExtendedFmdp, cap: float = 1e6, tol: float = 1e-6
) -> DiameterComparison:
    d_ext = diameter(flatten(ext.model), cap).value
    d_true = diameter(flatten(true_m), cap).value
    if math.isinf(d_true):
        ok = True
    else:
        ok = d_ext <= d_true + tol
    return DiameterComparison(ok, d_ext, d_true)


@dataclass(frozen=True)
class DeviationBound:
    lhs: float
    rhs: float
    ok: bool
    terms: tuple  # per-factor telescoping contributions, coordinate order 1..m


def factored_deviation_bound(p_rows, p_tilde_rows, h, sizes=None, tol: float = 1e-9) -> DeviationBound:
    """Compare ``sum (P_tilde - P) h`` with ``sum_i |P_i - P_tilde_i|_1 sp_i(h)``.

    ``terms[i]`` is the hybrid-product contribution with factors before ``i``
    at ``P_tilde`` and factors after ``i`` at ``P``; the terms sum to ``lhs``.
    """
    p_rows = [np.asarray(r, dtype=float) for r in p_rows]
    p_tilde_rows = [np.asarray(r, dtype=float) for r in p_tilde_rows]
    sizes = tuple(r.size for r in p_rows) if sizes is None else tuple(sizes)
    if len(p_rows) != len(p_tilde_rows) or len(p_rows) != len(sizes):
        raise ValidationError("factor counts differ")
    for r, q, size in zip(p_rows, p_tilde_rows, sizes):
        if r.shape != (size,) or q.shape != (size,):
            raise ValidationError(f"factor rows must have length {size}")
    h = np.asarray(h, dtype=float)
    if h.size != math.prod(sizes):
        raise ValidationError(f"h has {h.size} entries, expected {math.prod(sizes)}")
    lhs = float((_kron_row(p_tilde_rows) - _kron_row(p_rows)) @ h)
    profile = factored_span(h, sizes)
    rhs = float(sum(np.abs(p - q).sum() * sp for p, q, sp in zip(p_rows, p_tilde_rows, profile.factored_spans)))
    terms = []
    for i in range(len(sizes)):
        rows_hi = p_tilde_rows[:i] + [p_tilde_rows[i]] + p_rows[i + 1 :]
        rows_lo = p_tilde_rows[:i] + [p_rows[i]] + p_rows[i + 1 :]
        terms.append(float((_kron_row(rows_hi) - _kron_row(rows_lo)) @ h))
    return DeviationBound(lhs, rhs, lhs <= rhs + tol, tuple(terms))
