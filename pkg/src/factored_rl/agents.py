"""Online learners with a fixed arithmetic episode schedule.

DORL plans on the optimistic extended model, PSRL on a posterior sample,
f-Rmax on a known-pair model with an absorbing reward-1 state, and FSRL
searches candidate models for the best gain under a factored-span budget.
Every agent keeps its policy fixed within an episode.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .confidence import (
    DEFAULT_C_P,
    DEFAULT_C_R,
    VisitStatistics,
    compute_widths,
    empirical_model,
    in_confidence_set,
)
from .core import (
    GAUSSIAN,
    GAUSSIAN_RETRIES,
    FactoredMdp,
    RewardFactor,
    SizeError,
    TabularMdp,
    TransitionFactor,
    ValidationError,
    flatten,
    mixed_radix_strides,
)
from .extended import build_extended, extreme_dynamic, map_policy, solve_extended
from .planners import PlannerChoice, PlannerError, plan
from .solve import ConvergenceError, factored_span, solve_average_reward, solve_batch

log = logging.getLogger(__name__)

AGENT_KINDS = ("dorl", "psrl", "frmax", "fsrl")
DEFAULT_PSRL_C = 1.0
FSRL_MAX_FLAT = 2**10
FSRL_BATCH = 2048


# --- schedule ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EpisodeSchedule:
    lengths: np.ndarray
    L: int
    T: int

    @property
    def K(self) -> int:
        return int(self.lengths.size)

    @property
    def starts(self) -> np.ndarray:
        """0-based first step of every episode."""
        return np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)

    @property
    def max_length(self) -> int:
        return int(self.lengths.max()) if self.K else 0


def make_schedule(L: int, T: int) -> EpisodeSchedule:
    """Episode ``k`` lasts ``ceil(k / L)`` steps; the last one is cut at ``T``."""
    if L < 1 or T < 0:
        raise ValidationError("need L >= 1 and T >= 0")
    if T == 0:
        return EpisodeSchedule(np.zeros(0, dtype=np.int64), L, 0)
    # Full blocks of L episodes with lengths 1..j cover L * j * (j + 1) / 2 steps.
    j = int((math.isqrt(8 * T // L + 1) - 1) // 2)
    while L * j * (j + 1) // 2 > T:
        j -= 1
    lengths = np.repeat(np.arange(1, j + 1, dtype=np.int64), L)
    remaining = T - int(lengths.sum())
    tail = []
    length = j + 1
    while remaining > 0:
        step = min(length, remaining)
        tail.append(step)
        remaining -= step
    lengths = np.concatenate([lengths, np.array(tail, dtype=np.int64)])
    return EpisodeSchedule(lengths, L, T)


# --- configuration and records -------------------------------------------------


@dataclass(frozen=True)
class AgentConfig:
    kind: str = "dorl"
    rho: float = 0.05
    c: float | None = None  # DORL: replaces both 18 and 12; PSRL: posterior scale
    m_known: int = 300
    budget: float = math.inf  # FSRL span budget on Q(h)
    candidates: int = 512
    planner: PlannerChoice = PlannerChoice()
    track_confidence: bool = False

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValidationError(f"unknown agent kind {self.kind!r}")
        if not 0.0 < self.rho < 1.0:
            raise ValidationError("rho must lie in (0, 1)")
        if self.c is not None and not self.c > 0:
            raise ValidationError("c must be positive")
        if self.m_known < 1:
            raise ValidationError("m_known must be at least 1")
        if self.candidates < 0:
            raise ValidationError("candidates must be nonnegative")

    @property
    def width_coefficients(self) -> tuple:
        if self.c is None:
            return DEFAULT_C_P, DEFAULT_C_R
        return float(self.c), float(self.c)

    @property
    def param(self) -> float:
        """The swept hyper-parameter of this agent, for labelling."""
        if self.kind == "frmax":
            return float(self.m_known)
        if self.kind == "fsrl":
            return float(self.budget)
        if self.c is None:
            return DEFAULT_PSRL_C if self.kind == "psrl" else DEFAULT_C_P
        return float(self.c)


@dataclass(eq=False)
class RunRecord:
    agent: str
    seed: int
    rewards: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    schedule: EpisodeSchedule
    planner_gains: np.ndarray
    in_confidence: np.ndarray | None = None
    planner_failures: int = 0
    param: float = math.nan
    cum_regret: np.ndarray | None = None  # filled by the harness
    info: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return int(self.rewards.size)

    @property
    def episode_starts(self) -> np.ndarray:
        return self.schedule.starts

    def episode_of_step(self) -> np.ndarray:
        return np.repeat(np.arange(self.schedule.K), self.schedule.lengths)


# --- per-episode policies ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EpisodePlan:
    policy: np.ndarray
    gain: float
    bias: np.ndarray | None = None
    widths: object = None
    model: object = None


def _warm(warm, n):
    return None if warm is None or len(warm) != n else warm


def dorl_episode(stats: VisitStatistics, t_k: int, cfg: AgentConfig, warm=None) -> EpisodePlan:
    c_p, c_r = cfg.width_coefficients
    model = empirical_model(stats)
    widths = compute_widths(stats, cfg.rho, t_k, c_p, c_r, model)
    ext = build_extended(model, widths)
    A = stats.structure.spec.num_actions
    if cfg.planner.kind == "exact":
        report = solve_extended(ext, cfg.planner.tol, cfg.planner.max_iters, _warm(warm, ext.num_states))
        return EpisodePlan(map_policy(report.policy, A), report.gain, report.bias, widths, model)
    result = plan(ext.model, cfg.planner)
    return EpisodePlan(map_policy(result.policy, A), result.gain, result.bias, widths, model)


def _truncated_normal(rng, mean, std, retries=GAUSSIAN_RETRIES):
    out = np.array(mean, dtype=float, copy=True)
    pending = np.ones(out.shape, dtype=bool)
    draw = out
    for _ in range(retries):
        draw = mean + std * rng.standard_normal(out.shape)
        ok = pending & (draw >= 0.0) & (draw <= 1.0)
        out[ok] = draw[ok]
        pending &= ~ok
        if not pending.any():
            return out
    out[pending] = np.clip(draw[pending], 0.0, 1.0)
    return out


def sample_posterior(stats: VisitStatistics, c: float, rng: np.random.Generator, model=None) -> FactoredMdp:
    """Dirichlet rows with pseudo-counts ``(N + 1) / c``; Gaussian reward means."""
    st = stats.structure
    model = empirical_model(stats) if model is None else model
    transitions = []
    for i in range(st.m):
        alpha = (stats.transition_counts(i) + 1.0) / c
        g = rng.standard_gamma(alpha)
        total = g.sum(axis=1, keepdims=True)
        # Tiny concentrations can underflow every draw in a row; fall back to the mean.
        rows = np.where(total > 0, g / np.where(total > 0, total, 1.0), alpha / alpha.sum(axis=1, keepdims=True))
        transitions.append(TransitionFactor(st.transition_scopes[i], rows))
    rewards = []
    for j in range(st.l):
        # The reward scope is covered by the count over it, which is what the
        # transition-factor count marginalizes to when the reward scope is inside it.
        n = np.maximum(stats.reward_counts(j), 1)
        rewards.append(RewardFactor(st.reward_scopes[j], _truncated_normal(rng, model.r_hat[j], np.sqrt(c / n))))
    return FactoredMdp(st.spec, transitions, rewards, name="posterior-sample")


def psrl_episode(stats: VisitStatistics, cfg: AgentConfig, rng: np.random.Generator, warm=None) -> EpisodePlan:
    c = DEFAULT_PSRL_C if cfg.c is None else cfg.c
    sample = sample_posterior(stats, c, rng)
    result = plan(sample, cfg.planner, _warm(warm, sample.num_states))
    return EpisodePlan(result.policy, result.gain, result.bias, None, sample)


def known_mask(stats: VisitStatistics, m_known: int) -> np.ndarray:
    """Flat ``(S, A)`` mask of pairs whose every scoped pair has ``m_known`` visits."""
    st = stats.structure
    S, A = st.spec.num_states, st.spec.num_actions
    known = np.ones((S, A), dtype=bool)
    counts_x = stats.counts_x
    for i in range(st.m):
        known &= counts_x[i, : stats.p_rows[i]][stats.keys_p[i]] >= m_known
    for j in range(st.l):
        known &= stats.reward_counts(j)[stats.keys_r[j]] >= m_known
    return known


def frmax_model(stats: VisitStatistics, m_known: int) -> TabularMdp:
    """Empirical model on known pairs; unknown pairs jump to an absorbing state paying 1."""
    st = stats.structure
    S, A = st.spec.num_states, st.spec.num_actions
    known = known_mask(stats, m_known)
    P = np.zeros((S + 1, A, S + 1))
    R = np.ones((S + 1, A))
    if known.any():
        flat = flatten(empirical_model(stats).to_fmdp())
        P[:S, :, :S] = np.where(known[:, :, None], flat.transition, 0.0)
        R[:S] = np.where(known, flat.reward_mean, 1.0)
    P[:S, :, S] = ~known
    P[S, :, S] = 1.0
    return TabularMdp(P, R)


def frmax_episode(stats: VisitStatistics, m_known: int, cfg: AgentConfig | None = None, warm=None) -> EpisodePlan:
    planner = PlannerChoice() if cfg is None else cfg.planner
    model = frmax_model(stats, m_known)
    S = stats.structure.spec.num_states
    init = None if warm is None or len(warm) != S else np.append(warm, warm.max())
    report = solve_average_reward(model, planner.tol, planner.max_iters, init, multichain=True)
    return EpisodePlan(report.policy[:S].copy(), report.gain, report.bias[:S], None, model)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    n = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    return np.maximum(v - theta, 0.0)


def fsrl_candidates(stats, widths, model, count, rng):
    """Stacked flat ``(P, R)`` of random confidence-set members plus extreme models."""
    st = stats.structure
    spec = st.spec
    S, A = spec.num_states, spec.num_actions
    states = spec.state_table
    keys_p = st.transition_keys()
    keys_r = st.reward_keys()

    def flat_of(rows_per_factor, reward_tables):
        # rows_per_factor[i]: (C, K_i, S_i); reward_tables[j]: (C, K_j)
        C = rows_per_factor[0].shape[0]
        P = np.ones((C, S, A, S))
        for i, rows in enumerate(rows_per_factor):
            P *= rows[:, keys_p[i]][:, :, :, states[:, i]]
        R = np.zeros((C, S, A))
        for j, table in enumerate(reward_tables):
            R += table[:, keys_r[j]]
        return P, R

    out = []
    if count:
        rows = []
        for i in range(st.m):
            noise = rng.uniform(-1.0, 1.0, size=(count,) + model.p_hat[i].shape)
            rows.append(_project_simplex(model.p_hat[i][None] + noise * widths.p[i][None]))
        rewards = []
        for j in range(st.l):
            noise = rng.uniform(-1.0, 1.0, size=(count,) + model.r_hat[j].shape)
            rewards.append(np.clip(model.r_hat[j][None] + noise * widths.r[j][None], 0.0, 1.0))
        out.append(flat_of(rows, rewards))
    # One extreme candidate per target state.
    rows = []
    for i in range(st.m):
        size = spec.state_factor_sizes[i]
        ext_rows = np.empty((S,) + model.p_hat[i].shape)
        for t in range(S):
            target = states[t, i]
            ext_rows[t] = [extreme_dynamic(p, w, target) for p, w in zip(model.p_hat[i], widths.p[i])]
        rows.append(ext_rows)
        assert ext_rows.shape[-1] == size
    rewards = [np.broadcast_to(np.clip(model.r_hat[j] + widths.r[j], 0.0, 1.0), (S,) + model.r_hat[j].shape)
               for j in range(st.l)]
    out.append(flat_of(rows, rewards))
    P = np.concatenate([p for p, _ in out])
    R = np.concatenate([r for _, r in out])
    return P, R


def fsrl_search(P, R, sizes, budget, tol=1e-6, batch=FSRL_BATCH):
    """Best gain among candidates with ``Q(h) <= budget``; ``None`` when none survive."""
    best = None
    for lo in range(0, P.shape[0], batch):
        gains, biases, policies = solve_batch(P[lo : lo + batch], R[lo : lo + batch], tol)
        for g, h, pi in zip(gains, biases, policies):
            if factored_span(h, sizes).q <= budget + 1e-12 and (best is None or g > best[0]):
                best = (float(g), h, pi)
    return best


def fsrl_episode(stats: VisitStatistics, t_k: int, cfg: AgentConfig, rng: np.random.Generator) -> EpisodePlan:
    st = stats.structure
    spec = st.spec
    if spec.num_states * spec.num_actions > FSRL_MAX_FLAT:
        raise SizeError(f"FSRL search limited to {FSRL_MAX_FLAT} flat pairs")
    c_p, c_r = cfg.width_coefficients
    model = empirical_model(stats)
    widths = compute_widths(stats, cfg.rho, t_k, c_p, c_r, model)
    P, R = fsrl_candidates(stats, widths, model, cfg.candidates, rng)
    best = fsrl_search(P, R, spec.state_factor_sizes, cfg.budget, min(cfg.planner.tol, 1e-6))
    if best is None:
        result = plan(model.to_fmdp(), cfg.planner)
        return EpisodePlan(result.policy, result.gain, result.bias, widths, model)
    gain, h, policy = best
    return EpisodePlan(policy, gain, h, widths, model)


# --- main loop ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _EnvArrays:
    keys_p: np.ndarray
    cum_p: np.ndarray
    sizes_p: np.ndarray
    strides: np.ndarray
    keys_r: np.ndarray
    r_mean: np.ndarray
    r_kind: np.ndarray
    r_sigma: np.ndarray
    gaussian: bool


def env_arrays(env: FactoredMdp) -> _EnvArrays:
    st = env.structure
    spec = env.spec
    m, l = st.m, st.l
    sizes = np.array(spec.state_factor_sizes, dtype=np.int64)
    kp = max(st.transition_rows(i) for i in range(m))
    cum = np.ones((m, kp, int(sizes.max())))
    for i, f in enumerate(env.transitions):
        cum[i, : f.table.shape[0], : sizes[i]] = np.cumsum(f.table, axis=1)
    kr = max([st.reward_rows(j) for j in range(l)], default=1)
    r_mean = np.zeros((max(l, 0), kr))
    r_kind = np.zeros((max(l, 0), kr), dtype=np.int64)
    r_sigma = np.zeros((max(l, 0), kr))
    for j, f in enumerate(env.rewards):
        r_mean[j, : f.mean.size] = f.mean
        r_kind[j, : f.mean.size] = f.kind
        r_sigma[j, : f.mean.size] = f.sigma
    return _EnvArrays(
        np.ascontiguousarray(st.transition_keys()), cum, sizes, mixed_radix_strides(sizes),
        np.ascontiguousarray(st.reward_keys()), r_mean, r_kind, r_sigma,
        bool((r_kind == GAUSSIAN).any()),
    )


def rollout(env_arr: _EnvArrays, stats: VisitStatistics, state: int, policy, n: int, rng):
    """Run ``policy`` for ``n`` steps; returns ``(rewards, states, final_state)``."""
    m, l = env_arr.keys_p.shape[0], env_arr.keys_r.shape[0]
    u_p = rng.random((n, m))
    u_r = rng.random((n, l))
    z_r = rng.standard_normal((n, l, GAUSSIAN_RETRIES)) if env_arr.gaussian else np.zeros((n, l, 0))
    rewards = np.empty(n)
    states = np.empty(n, dtype=np.int64)
    final = kernels.simulate(
        np.int64(state), np.ascontiguousarray(policy, dtype=np.int64),
        env_arr.keys_p, env_arr.cum_p, env_arr.sizes_p, env_arr.strides,
        env_arr.keys_r, env_arr.r_mean, env_arr.r_kind, env_arr.r_sigma,
        u_p, u_r, z_r, stats.counts_p, stats.counts_r, stats.sums_r, rewards, states,
    )
    stats.t += n
    return rewards, states, int(final)


def run_agent(
    env: FactoredMdp,
    cfg: AgentConfig,
    T: int,
    L: int | None = None,
    seed: int = 0,
    initial_state: int | None = None,
) -> RunRecord:
    """Learn online for ``T`` steps.

    ``L`` defaults to the environment's scope bound. The environment and the
    agent draw from two independent streams spawned from ``seed``.
    """
    if T < 0:
        raise ValidationError("T must be nonnegative")
    L = env.scope_bound if L is None else int(L)
    schedule = make_schedule(L, T)
    env_rng, agent_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    stats = VisitStatistics.for_mdp(env)
    arrays = env_arrays(env)
    S = env.num_states
    state = env.initial_state if initial_state is None else int(initial_state)
    rewards = np.empty(T)
    states = np.empty(T, dtype=np.int64)
    actions = np.empty(T, dtype=np.int64)
    gains = np.full(schedule.K, np.nan)
    membership = np.zeros(schedule.K, dtype=bool) if cfg.track_confidence else None
    policy = np.zeros(S, dtype=np.int64)
    warm = None
    failures = 0
    for k, (start, length) in enumerate(zip(schedule.starts, schedule.lengths)):
        t_k = int(start) + 1
        try:
            if cfg.kind == "dorl":
                result = dorl_episode(stats, t_k, cfg, warm)
            elif cfg.kind == "psrl":
                result = psrl_episode(stats, cfg, agent_rng, warm)
            elif cfg.kind == "frmax":
                result = frmax_episode(stats, cfg.m_known, cfg, warm)
            else:
                result = fsrl_episode(stats, t_k, cfg, agent_rng)
            policy = np.asarray(result.policy, dtype=np.int64)
            gains[k] = result.gain
            warm = result.bias
        except (ConvergenceError, PlannerError) as exc:
            failures += 1
            log.warning("episode %d: planner failed (%s); keeping the previous policy", k, exc)
            result = None
        if membership is not None:
            widths = result.widths if result is not None and result.widths is not None else None
            model = result.model if widths is not None else empirical_model(stats)
            if widths is None:
                c_p, c_r = cfg.width_coefficients
                widths = compute_widths(stats, cfg.rho, t_k, c_p, c_r, model)
            membership[k] = in_confidence_set(env, model, widths).inside
        seg = slice(int(start), int(start + length))
        r, s, state = rollout(arrays, stats, state, policy, int(length), env_rng)
        rewards[seg] = r
        states[seg] = s
        actions[seg] = policy[s]
    return RunRecord(
        cfg.kind, int(seed), rewards, states, actions, schedule, gains, membership, failures, cfg.param
    )


def visit_ratio_sum(record: RunRecord, env: FactoredMdp, scope) -> float:
    """``sum_x sum_k nu_k(x) / sqrt(max(1, N_k(x)))`` over the scoped pairs of ``scope``."""
    keys = env.spec.keys(scope)[record.states, record.actions]
    size = env.spec.scope_size(scope)
    counts = np.zeros(size)
    total = 0.0
    for start, length in zip(record.schedule.starts, record.schedule.lengths):
        nu = np.bincount(keys[start : start + length], minlength=size)
        total += float((nu / np.sqrt(np.maximum(counts, 1.0))).sum())
        counts += nu
    return total


def visit_ratio_bound(schedule: EpisodeSchedule) -> float:
    L, T = schedule.L, schedule.T
    return L * schedule.max_length + (2.0 + math.sqrt(2.0)) * math.sqrt(L * T)
