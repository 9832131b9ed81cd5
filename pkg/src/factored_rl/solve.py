"""Average-reward planning and connectivity analytics on flat MDPs."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .core import TabularMdp, ValidationError

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 10**6
APERIODICITY = 0.5
MULTICHAIN_TOL = 1e-6
DIAMETER_CAP = 1e6
REFERENCE_STATE = 0


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class EvaluationError(RuntimeError):
    """Raised when a policy's gain depends on the start state."""


@dataclass(frozen=True, eq=False)
class GainBias:
    gain: float
    bias: np.ndarray
    residual: float

    @property
    def span(self) -> float:
        return span(self.bias)


@dataclass(frozen=True, eq=False)
class SolveReport:
    gain_bias: GainBias
    policy: np.ndarray
    iterations: int

    @property
    def gain(self) -> float:
        return self.gain_bias.gain

    @property
    def bias(self) -> np.ndarray:
        return self.gain_bias.bias


@dataclass(frozen=True)
class SpanProfile:
    span: float
    factored_spans: tuple
    q: float


@dataclass(frozen=True)
class DiameterResult:
    value: float  # math.inf when some pair is unreachable or beyond the cap
    cap_used: float

    @property
    def infinite(self) -> bool:
        return math.isinf(self.value)


def span(h) -> float:
    h = np.asarray(h, dtype=float)
    if h.size == 0:
        raise ValidationError("span of an empty vector")
    return float(h.max() - h.min())


def factored_span(h, state_factor_sizes: Sequence[int]) -> SpanProfile:
    """Per-factor worst-case coordinate spans of ``h`` and their sum."""
    h = np.asarray(h, dtype=float)
    sizes = tuple(int(v) for v in state_factor_sizes)
    if h.size != math.prod(sizes):
        raise ValidationError(f"bias of length {h.size} does not match factor sizes {sizes}")
    # C-order reshape puts factor 1 (least significant) on the last axis.
    grid = h.reshape(tuple(reversed(sizes)))
    m = len(sizes)
    spans = []
    for i in range(m):
        axis = m - 1 - i
        spans.append(float((grid.max(axis=axis) - grid.min(axis=axis)).max()))
    return SpanProfile(span(h), tuple(spans), float(sum(spans)))


def check_span_bounds(profile: SpanProfile, m: int, tol: float = 1e-9) -> bool:
    return profile.span <= profile.q + tol and profile.q <= m * profile.span + tol


def relative_value_iteration(
    backup: Callable,
    num_states: int,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    init=None,
    tau: float = APERIODICITY,
    multichain: bool = False,
    evaluate: Callable | None = None,
    sweeps: int = 0,
):
    """Relative value iteration on the aperiodic transform ``tau*I + (1-tau)*P``.

    ``backup(v, coef)`` must return ``(best, argmax)`` of
    ``R(s, a) + coef * (P v)(s, a)`` over actions. ``init`` is a bias
    vector in original units (used for warm starts).

    With ``evaluate(v, coef, policy)`` and ``sweeps > 0``, every full
    backup is followed by that many fixed-policy sweeps (modified policy
    iteration). The stopping test is only applied to full backups, so the
    returned accuracy does not depend on the sweeps.

    Returns ``(gain, bias, policy, residual, iterations)`` in original units:
    the bias is ``(1 - tau)`` times the transformed relative values, and the
    gain is unchanged by the transform.
    """
    scale = 1.0 - tau
    v = np.zeros(num_states) if init is None else np.asarray(init, dtype=float) / scale
    v = v - v[REFERENCE_STATE]
    prev_delta = None
    residual = math.inf
    for it in range(1, max_iters + 1):
        best, policy = backup(v, scale)
        tv = best + tau * v
        delta = tv - v
        residual = float(delta.max() - delta.min())
        done = residual <= tol
        if multichain and not done and prev_delta is not None:
            done = float(np.abs(delta - prev_delta).max()) <= tol
        if done:
            if residual <= tol:
                gain = 0.5 * (float(delta.max()) + float(delta.min()))
            else:
                gain = float(delta.max())
            bias = scale * v
            return gain, bias, policy, residual / 2.0, it
        prev_delta = delta
        v = tv - tv[REFERENCE_STATE]
        if evaluate is not None:
            for _ in range(sweeps):
                v = evaluate(v, scale, policy) + tau * v
                v = v - v[REFERENCE_STATE]
    raise ConvergenceError(
        f"relative value iteration did not converge in {max_iters} iterations "
        f"(residual span {residual:.3e})",
        residual,
    )


def tabular_backup(mdp: TabularMdp):
    P, R = mdp.transition, mdp.reward_mean

    def backup(v, coef):
        q = R + coef * (P @ v)
        return q.max(axis=1), q.argmax(axis=1)

    return backup


def solve_average_reward(
    mdp: TabularMdp,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    init=None,
    multichain: bool = False,
) -> SolveReport:
    """Optimal gain, bias and greedy policy by relative value iteration.

    With ``multichain=True`` the iteration also stops once the per-state
    increments stop changing, which is the right stopping rule when the
    optimal gain differs between states; the returned gain is then the
    largest per-state gain.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    gain, bias, policy, residual, iters = relative_value_iteration(
        tabular_backup(mdp), mdp.num_states, tol, max_iters, init, multichain=multichain
    )
    return SolveReport(GainBias(gain, bias, residual), policy.astype(np.int64), iters)


def policy_matrices(mdp: TabularMdp, policy):
    policy = np.asarray(policy, dtype=np.int64)
    idx = np.arange(mdp.num_states)
    return mdp.transition[idx, policy], mdp.reward_mean[idx, policy]


def recurrent_classes(P: np.ndarray, eps: float = 0.0) -> list:
    """Closed communicating classes of the chain with transition matrix ``P``."""
    graph = csr_matrix(P > eps)
    ncomp, labels = connected_components(graph, directed=True, connection="strong")
    closed = []
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        outside = P[np.ix_(members, np.flatnonzero(labels != c))]
        if not (outside > eps).any():
            closed.append(members)
    return closed


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    system = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    d, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    d = np.clip(d, 0.0, None)
    return d / d.sum()


def policy_gain_bias(mdp: TabularMdp, policy, tol: float = DEFAULT_TOL) -> GainBias:
    """Exact gain and bias of a stationary deterministic policy."""
    P, R = policy_matrices(mdp, policy)
    S = mdp.num_states
    gains = []
    for members in recurrent_classes(P):
        d = stationary_distribution(P[np.ix_(members, members)])
        gains.append(float(d @ R[members]))
    if max(gains) - min(gains) > MULTICHAIN_TOL:
        raise EvaluationError(
            f"gain depends on the start state: recurrent-class gains {sorted(gains)}"
        )
    # Unknowns: gain, then h(s) for every s except the reference state.
    system = np.zeros((S, S))
    system[:, 0] = 1.0
    others = [s for s in range(S) if s != REFERENCE_STATE]
    system[:, 1:] = (np.eye(S) - P)[:, others]
    if len(gains) == 1:
        sol = np.linalg.solve(system, R)
    else:
        sol, *_ = np.linalg.lstsq(system, R, rcond=None)
    gain = float(sol[0])
    h = np.zeros(S)
    h[others] = sol[1:]
    residual = float(np.abs(gain + h - R - P @ h).max())
    if residual > max(tol, 1e-9) * (1.0 + span(h)) * 10:
        raise EvaluationError(f"policy evaluation residual {residual:.3e} exceeds tolerance")
    return GainBias(gain, h, residual)


def brute_force_optimal(mdp: TabularMdp, cap: int = 10**6, tol: float = 1e-9) -> SolveReport:
    """Enumerate every deterministic stationary policy; ties go to the largest bias span."""
    S, A = mdp.num_states, mdp.num_actions
    if A**S > cap:
        raise ValidationError(f"{A}^{S} policies exceeds the enumeration cap {cap}")
    best = None
    count = 0
    for policy in itertools.product(range(A), repeat=S):
        count += 1
        try:
            gb = policy_gain_bias(mdp, policy)
        except EvaluationError:
            continue
        if best is None or gb.gain > best[0].gain + tol or (
            abs(gb.gain - best[0].gain) <= tol and gb.span > best[0].span + tol
        ):
            best = (gb, np.array(policy, dtype=np.int64))
    if best is None:
        raise EvaluationError("no policy has a start-state independent gain")
    return SolveReport(best[0], best[1], count)


# --- diameter ----------------------------------------------------------------


def _almost_sure_reach(support: np.ndarray, target: int):
    """States reaching ``target`` with probability one under some policy.

    ``support`` is the boolean ``(S, A, S)`` tensor of positive transitions.
    Returns the winning set and, for each winning state, an action that
    keeps the process inside the set while moving closer to the target.
    """
    S, A, _ = support.shape
    inside = np.ones(S, dtype=bool)
    while True:
        safe = ~(support & ~inside[None, None, :]).any(axis=2)  # (S, A)
        safe &= inside[:, None]
        reached = np.zeros(S, dtype=bool)
        reached[target] = True
        action = np.full(S, -1, dtype=np.int64)
        frontier = reached.copy()
        while frontier.any():
            hits = safe & (support[:, :, frontier].any(axis=2))
            new = hits.any(axis=1) & ~reached
            action[new] = hits[new].argmax(axis=1)
            reached |= new
            frontier = new
        if (reached == inside).all():
            return inside, action, safe
        inside = reached


def _hitting_times(P: np.ndarray, target: int, cap: float) -> np.ndarray:
    """Minimum expected hitting times of ``target`` from every state."""
    S = P.shape[0]
    inside, policy, safe = _almost_sure_reach(P > 0, target)
    times = np.full(S, math.inf)
    times[target] = 0.0
    states = np.flatnonzero(inside & (np.arange(S) != target))
    if states.size == 0:
        return times
    cols = np.flatnonzero(inside & (np.arange(S) != target))
    policy = policy.copy()
    e = np.zeros(S)
    for _ in range(10 * S + 100):
        # Policy evaluation: (I - P_pi) E = 1 on the transient states.
        Ppi = P[states, policy[states]][:, cols]
        sol = np.linalg.solve(np.eye(states.size) - Ppi, np.ones(states.size))
        e[:] = 0.0
        e[states] = sol
        # Greedy improvement over actions that cannot leave the winning set.
        q = 1.0 + P[states] @ e  # (k, A)
        q = np.where(safe[states], q, math.inf)
        current = q[np.arange(states.size), policy[states]]
        best = q.min(axis=1)
        improve = best < current - 1e-12 * np.maximum(1.0, current)
        if not improve.any():
            break
        policy[states[improve]] = q[improve].argmin(axis=1)
    times[states] = e[states]
    times[times > cap] = math.inf
    return times


def hitting_times(mdp: TabularMdp, target: int, cap: float = DIAMETER_CAP) -> np.ndarray:
    return _hitting_times(mdp.transition, int(target), cap)


def diameter(mdp: TabularMdp, cap: float = DIAMETER_CAP) -> DiameterResult:
    """max over ordered pairs of the minimum expected travel time.

    Value iteration on the hitting-time equations is carried out in its
    policy-iteration form (greedy improvement plus exact evaluation), which
    reaches the fixed point in a handful of sweeps; states that cannot reach
    the target almost surely get an infinite time directly.
    """
    worst = 0.0
    for target in range(mdp.num_states):
        times = _hitting_times(mdp.transition, target, cap)
        worst = max(worst, float(times.max()))
        if math.isinf(worst):
            break
    return DiameterResult(worst, cap)


def solve_batch(
    P: np.ndarray,
    R: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    tau: float = APERIODICITY,
):
    """Relative value iteration on a stack of MDPs sharing ``S`` and ``A``.

    ``P`` is ``(C, S, A, S)`` and ``R`` is ``(C, S, A)``. Uses the same
    transform and stopping rules as the single-model solver, with the
    multichain rule always on. Returns ``(gains, biases, policies)``.
    """
    C, S, A, _ = P.shape
    scale = 1.0 - tau
    v = np.zeros((C, S))
    gains = np.full(C, np.nan)
    biases = np.zeros((C, S))
    policies = np.zeros((C, S), dtype=np.int64)
    active = np.arange(C)
    prev = None
    for _ in range(max_iters):
        q = R[active] + scale * np.einsum("csat,ct->csa", P[active], v[active])
        best = q.max(axis=2)
        tv = best + tau * v[active]
        delta = tv - v[active]
        spans = delta.max(axis=1) - delta.min(axis=1)
        done = spans <= tol
        stalled = np.zeros_like(done)
        if prev is not None:
            stalled = np.abs(delta - prev).max(axis=1) <= tol
        finished = done | stalled
        if finished.any():
            idx = active[finished]
            d = delta[finished]
            gains[idx] = np.where(
                done[finished], 0.5 * (d.max(axis=1) + d.min(axis=1)), d.max(axis=1)
            )
            biases[idx] = scale * v[idx]
            policies[idx] = q[finished].argmax(axis=2)
        v[active] = tv - tv[:, REFERENCE_STATE : REFERENCE_STATE + 1]
        keep = ~finished
        active = active[keep]
        prev = delta[keep]
        if active.size == 0:
            return gains, biases, policies
    raise ConvergenceError(f"{active.size} of {C} models did not converge", math.inf)
