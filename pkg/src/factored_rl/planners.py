"""Planner oracles: exact flattened planning and approximate linear programming."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_FLATTEN_CAP, FactoredMdp, SizeError, ValidationError, flatten
from .solve import DEFAULT_MAX_ITERS, DEFAULT_TOL, solve_average_reward

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"


class PlannerError(RuntimeError):
    pass


# --- linear programming ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """minimize ``c @ x`` subject to ``A @ x >= b`` and ``lower <= x <= upper``."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float)
        n = c.size
        if A.size == 0:
            A = np.zeros((0, n))
        if A.shape != (b.size, n):
            raise ValidationError(f"constraint matrix {A.shape} does not match {b.size} rows x {n} vars")
        lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if lower.shape != (n,) or upper.shape != (n,):
            raise ValidationError("bounds must have one entry per variable")
        if (lower > upper).any():
            raise ValidationError("lower bound exceeds upper bound")
        for name, value in (("c", c), ("A", A), ("b", b), ("lower", lower), ("upper", upper)):
            object.__setattr__(self, name, value)

    @property
    def num_vars(self) -> int:
        return self.c.size

    @property
    def num_rows(self) -> int:
        return self.b.size


@dataclass(frozen=True, eq=False)
class LpResult:
    status: str
    x: np.ndarray
    objective: float
    iterations: int
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _to_standard(lp: LinearProgram):
    """Rewrite as ``min c'y, A'y = b', y >= 0`` and return the back-map."""
    n = lp.num_vars
    cols = []  # (source var, sign) per standard column
    shift = np.zeros(n)
    extra_rows = []  # (column, bound) for y <= ub - lb
    for j in range(n):
        lo, hi = lp.lower[j], lp.upper[j]
        if np.isfinite(lo):
            shift[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                extra_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            shift[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    k = len(cols)
    M = np.zeros((n, k))
    for col, (j, sign) in enumerate(cols):
        M[j, col] = sign
    # x = shift + M y
    A = lp.A @ M
    b = lp.b - lp.A @ shift
    c = lp.c @ M
    rows = lp.num_rows
    # A y - s = b for the >= rows; y_col + u = bound for the box rows.
    total_rows = rows + len(extra_rows)
    total_cols = k + total_rows
    A_eq = np.zeros((total_rows, total_cols))
    b_eq = np.zeros(total_rows)
    A_eq[:rows, :k] = A
    A_eq[:rows, k : k + rows] = -np.eye(rows)
    b_eq[:rows] = b
    for r, (col, bound) in enumerate(extra_rows):
        A_eq[rows + r, col] = 1.0
        A_eq[rows + r, k + rows + r] = 1.0
        b_eq[rows + r] = bound
    c_eq = np.zeros(total_cols)
    c_eq[:k] = c
    return A_eq, b_eq, c_eq, M, shift, float(lp.c @ shift)


def _pivot(T, row, col):
    T[row] /= T[row, col]
    pivot_row = T[row]
    factors = T[:, col].copy()
    factors[row] = 0.0
    T -= factors[:, None] * pivot_row[None, :]


def _simplex(T, basis, allowed, tol, max_iters, bland_after, counter):
    """Minimize the objective in the last row of tableau ``T`` in place."""
    rows = T.shape[0] - 1
    while True:
        if counter[0] >= max_iters:
            return ITERATION_LIMIT
        reduced = T[-1, :-1]
        candidates = np.flatnonzero((reduced < -tol) & allowed)
        if candidates.size == 0:
            return OPTIMAL
        if counter[0] >= bland_after:
            col = int(candidates[0])
        else:
            col = int(candidates[np.argmin(reduced[candidates])])
        column = T[:rows, col]
        positive = column > tol
        if not positive.any():
            return UNBOUNDED
        ratios = np.full(rows, np.inf)
        ratios[positive] = T[:rows, -1][positive] / column[positive]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
        # Bland: leave with the smallest basic variable index among ties.
        row = int(ties[np.argmin(np.asarray(basis)[ties])])
        _pivot(T, row, col)
        basis[row] = col
        counter[0] += 1


def solve_lp(lp: LinearProgram, tol: float = 1e-9, max_iters: int | None = None) -> LpResult:
    """Dense two-phase simplex.

    Dantzig's most-negative reduced cost is used until ``10 * (rows + cols)``
    pivots, then Bland's rule, which cannot cycle.
    """
    A, b, c, M, shift, offset = _to_standard(lp)
    rows, cols = A.shape
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    bland_after = 10 * (rows + cols)
    max_iters = 50 * (rows + cols) + 1000 if max_iters is None else max_iters
    # Phase 1 tableau with one artificial per row.
    T = np.zeros((rows + 1, cols + rows + 1))
    T[:rows, :cols] = A
    T[:rows, cols : cols + rows] = np.eye(rows)
    T[:rows, -1] = b
    T[-1, :cols] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(cols, cols + rows))
    counter = [0]
    allowed = np.ones(cols + rows, dtype=bool)
    status = _simplex(T, basis, allowed, tol, max_iters, bland_after, counter)
    if status == ITERATION_LIMIT:
        return LpResult(status, np.full(lp.num_vars, np.nan), math.nan, counter[0], "phase 1 iteration limit")
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    if -T[-1, -1] > 1e-7 * scale:
        return LpResult(INFEASIBLE, np.full(lp.num_vars, np.nan), math.nan, counter[0],
                        f"phase 1 residual {-T[-1, -1]:.3e}")
    # Drive artificials out of the basis where possible.
    for r in range(rows):
        if basis[r] >= cols:
            nonzero = np.flatnonzero(np.abs(T[r, :cols]) > tol)
            if nonzero.size:
                _pivot(T, r, int(nonzero[0]))
                basis[r] = int(nonzero[0])
    # Phase 2: real objective, artificials barred from entering.
    T[-1, :] = 0.0
    T[-1, :cols] = c
    for r, var in enumerate(basis):
        if var < cols and T[-1, var] != 0.0:
            T[-1] -= T[-1, var] * T[r]
    allowed[cols:] = False
    status = _simplex(T, basis, allowed, tol, max_iters, bland_after, counter)
    y = np.zeros(cols + rows)
    for r, var in enumerate(basis):
        y[var] = T[r, -1]
    x = shift + M @ y[: M.shape[1]]
    if status != OPTIMAL:
        return LpResult(status, x, math.nan, counter[0], f"phase 2 stopped: {status}")
    return LpResult(OPTIMAL, x, float(lp.c @ x), counter[0])


# --- approximate linear programming ------------------------------------------


def default_basis(mdp: FactoredMdp) -> tuple:
    """``h_i(s) = s_i`` for every state factor."""
    return tuple((i, np.arange(size, dtype=float)) for i, size in enumerate(mdp.spec.state_factor_sizes))


def _check_basis(mdp: FactoredMdp, basis) -> tuple:
    out = []
    for factor, values in basis:
        values = np.asarray(values, dtype=float)
        if not 0 <= factor < mdp.spec.m:
            raise ValidationError(f"basis factor {factor} out of range")
        if values.shape != (mdp.spec.state_factor_sizes[factor],):
            raise ValidationError(f"basis on factor {factor} needs {mdp.spec.state_factor_sizes[factor]} values")
        out.append((int(factor), values))
    return tuple(out)


def basis_expectations(mdp: FactoredMdp, basis) -> tuple:
    """``(H, E)``: basis values per state ``(S, k)`` and ``E[h_j(s') | s, a]`` as ``(S, A, k)``."""
    basis = _check_basis(mdp, basis)
    S, A = mdp.num_states, mdp.num_actions
    H = np.empty((S, len(basis)))
    E = np.empty((S, A, len(basis)))
    states = mdp.spec.state_table
    for j, (i, values) in enumerate(basis):
        H[:, j] = values[states[:, i]]
        factor = mdp.transitions[i]
        E[:, :, j] = (factor.table @ values)[mdp.transition_keys(i)]
    return H, E


def reward_matrix(mdp: FactoredMdp) -> np.ndarray:
    R = np.zeros((mdp.num_states, mdp.num_actions))
    for j, factor in enumerate(mdp.rewards):
        R += factor.mean[mdp.reward_keys(j)]
    return R


def build_alp(mdp: FactoredMdp, basis=None, cap: int = DEFAULT_FLATTEN_CAP) -> LinearProgram:
    """Variables ``(lambda, w_1..w_k)``; one constraint per flat ``(s, a)``."""
    basis = default_basis(mdp) if basis is None else basis
    S, A = mdp.num_states, mdp.num_actions
    k = len(basis)
    if S * A * (k + 1) > cap:
        raise SizeError(f"ALP would have {S * A} rows x {k + 1} columns, cap is {cap} entries")
    H, E = basis_expectations(mdp, basis)
    rows = np.empty((S, A, k + 1))
    rows[:, :, 0] = 1.0
    rows[:, :, 1:] = H[:, None, :] - E
    c = np.zeros(k + 1)
    c[0] = 1.0
    return LinearProgram(c, rows.reshape(S * A, k + 1), reward_matrix(mdp).reshape(S * A))


def greedy_from_weights(mdp: FactoredMdp, w, basis=None) -> np.ndarray:
    basis = default_basis(mdp) if basis is None else basis
    _, E = basis_expectations(mdp, basis)
    q = reward_matrix(mdp) + E @ np.asarray(w, dtype=float)
    return q.argmax(axis=1).astype(np.int64)


# --- planner front end --------------------------------------------------------


@dataclass(frozen=True)
class PlannerChoice:
    kind: str = "exact"  # "exact" or "alp"
    basis: tuple = None  # ((factor, values), ...); None means h_i(s) = s_i
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    cap: int = DEFAULT_FLATTEN_CAP
    lp_tol: float = 1e-9

    def __post_init__(self):
        if self.kind not in ("exact", "alp"):
            raise ValidationError(f"unknown planner kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class PlanResult:
    policy: np.ndarray
    gain: float
    bias: np.ndarray = None
    weights: np.ndarray = None
    iterations: int = 0
    info: dict = field(default_factory=dict)


def plan(mdp: FactoredMdp, choice: PlannerChoice = PlannerChoice(), init=None) -> PlanResult:
    if choice.kind == "exact":
        report = solve_average_reward(flatten(mdp, choice.cap), choice.tol, choice.max_iters, init)
        return PlanResult(report.policy, report.gain, report.bias, None, report.iterations)
    basis = default_basis(mdp) if choice.basis is None else choice.basis
    lp = build_alp(mdp, basis, choice.cap)
    result = solve_lp(lp, choice.lp_tol)
    if not result.ok:
        raise PlannerError(f"ALP solve failed: {result.status} ({result.message})")
    weights = result.x[1:]
    H, _ = basis_expectations(mdp, basis)
    policy = greedy_from_weights(mdp, weights, basis)
    return PlanResult(policy, float(result.x[0]), H @ weights, weights, result.iterations)
