"""Hot inner loops.

Each kernel has a loop form (compiled by numba when enabled) and a numpy
form. Both consume the same pre-drawn random numbers, so they produce
identical trajectories; ``FRL_NUMBA=0`` selects the numpy forms.
"""

import numpy as np

from . import _accel
from ._accel import jit

DETERMINISTIC, BERNOULLI, GAUSSIAN = 0, 1, 2


# --- environment rollout -------------------------------------------------------


@jit
def _simulate_loop(state, policy, keys_p, cum_p, sizes_p, strides,
                   keys_r, r_mean, r_kind, r_sigma, u_p, u_r, z_r,
                   counts_p, counts_r, sums_r, rewards_out, states_out):
    n_steps = u_p.shape[0]
    m = keys_p.shape[0]
    l = keys_r.shape[0]
    retries = z_r.shape[2]
    s = state
    for t in range(n_steps):
        a = policy[s]
        states_out[t] = s
        total = 0.0
        for j in range(l):
            key = keys_r[j, s, a]
            kind = r_kind[j, key]
            mu = r_mean[j, key]
            if kind == DETERMINISTIC:
                r = mu
            elif kind == BERNOULLI:
                r = 1.0 if u_r[t, j] < mu else 0.0
            else:
                r = mu
                accepted = False
                for g in range(retries):
                    r = mu + r_sigma[j, key] * z_r[t, j, g]
                    if r >= 0.0 and r <= 1.0:
                        accepted = True
                        break
                if not accepted:
                    r = min(1.0, max(0.0, r))
            counts_r[j, key] += 1
            sums_r[j, key] += r
            total += r
        rewards_out[t] = total
        nxt = 0
        for i in range(m):
            key = keys_p[i, s, a]
            u = u_p[t, i]
            v = 0
            last = sizes_p[i] - 1
            while v < last and u >= cum_p[i, key, v]:
                v += 1
            counts_p[i, key, v] += 1
            nxt += v * strides[i]
        s = nxt
    return s


def _simulate_numpy(state, policy, keys_p, cum_p, sizes_p, strides,
                    keys_r, r_mean, r_kind, r_sigma, u_p, u_r, z_r,
                    counts_p, counts_r, sums_r, rewards_out, states_out):
    m, l = keys_p.shape[0], keys_r.shape[0]
    fi, ri = np.arange(m), np.arange(l)
    retries = z_r.shape[2]
    s = int(state)
    for t in range(u_p.shape[0]):
        a = policy[s]
        states_out[t] = s
        if l:
            key_r = keys_r[:, s, a]
            mu = r_mean[ri, key_r]
            kind = r_kind[ri, key_r]
            r = np.where(kind == BERNOULLI, (u_r[t] < mu).astype(float), mu)
            gauss = kind == GAUSSIAN
            if gauss.any():
                draws = mu[:, None] + r_sigma[ri, key_r][:, None] * z_r[t]
                ok = (draws >= 0.0) & (draws <= 1.0)
                first = np.where(ok.any(axis=1), ok.argmax(axis=1), retries - 1)
                pick = np.clip(draws[ri, first], 0.0, 1.0)
                r = np.where(gauss, pick, r)
            counts_r[ri, key_r] += 1
            sums_r[ri, key_r] += r
            # left-to-right summation, identical to the loop form
            total = 0.0
            for value in r:
                total += value
            rewards_out[t] = total
        else:
            rewards_out[t] = 0.0
        key_p = keys_p[:, s, a]
        rows = cum_p[fi, key_p]
        v = (u_p[t][:, None] >= rows).sum(axis=1)
        v = np.minimum(v, sizes_p - 1)
        counts_p[fi, key_p, v] += 1
        s = int((v * strides).sum())
    return s


def simulate(*args):
    """Roll a fixed policy forward, updating visit counts in place."""
    if _accel.USE_NUMBA:
        return int(_simulate_loop(*args))
    return _simulate_numpy(*args)


# --- extended-MDP Bellman backup ---------------------------------------------


@jit
def _extended_backup_loop(h, coef, keys_p, base, wsum, sizes, r_ext, best, arg):
    S, A = r_ext.shape
    m = keys_p.shape[0]
    buf_a = np.empty(S)
    buf_b = np.empty(S)
    acc = np.empty(S)
    for s in range(S):
        best_val = -np.inf
        best_idx = 0
        for a in range(A):
            for k in range(S):
                buf_a[k] = h[k]
            tp = 1
            rest = S
            for i in range(m):
                si = sizes[i]
                rest = rest // si
                key = keys_p[i, s, a]
                ws = wsum[i, key]
                # acc[tp, r] = sum_v base[v] * G[tp, r, v]
                for p in range(tp):
                    for r in range(rest):
                        off = (p * rest + r) * si
                        total = 0.0
                        for v in range(si):
                            total += base[i, key, v] * buf_a[off + v]
                        acc[p * rest + r] = total
                # G'[t, tp, r] = acc[tp, r] + ws * G[tp, r, t]
                for t in range(si):
                    for p in range(tp):
                        for r in range(rest):
                            buf_b[(t * tp + p) * rest + r] = (
                                acc[p * rest + r] + ws * buf_a[(p * rest + r) * si + t]
                            )
                tp = tp * si
                for k in range(S):
                    buf_a[k] = buf_b[k]
            for t in range(S):
                val = r_ext[s, a] + coef * buf_a[t]
                idx = t * A + a
                if val > best_val or (val == best_val and idx < best_idx):
                    best_val = val
                    best_idx = idx
        best[s] = best_val
        arg[s] = best_idx


def _extended_expectations_numpy(h, keys_p, base, wsum, sizes):
    """E[h] under every extreme dynamic, shape ``(S, A, S_targets)``."""
    m, S, A = keys_p.shape
    B = S * A
    g = np.broadcast_to(h.reshape(1, 1, S), (B, 1, S))
    tp, rest = 1, S
    for i in range(m):
        si = int(sizes[i])
        rest //= si
        keys = keys_p[i].reshape(B)
        b = base[i, keys, :si]  # (B, si)
        ws = wsum[i, keys]  # (B,)
        grid = g.reshape(B, tp, rest, si)
        acc = np.einsum("bv,bprv->bpr", b, grid)
        nxt = acc[:, None, :, :] + ws[:, None, None, None] * np.moveaxis(grid, 3, 1)
        tp *= si
        g = nxt.reshape(B, tp, rest)
    return g.reshape(S, A, S)


def extended_backup(h, coef, keys_p, base, wsum, sizes, r_ext):
    """max over (action, target) of ``r_ext + coef * E[h]`` per state.

    The flat extended action is ``target * A + action``.
    """
    S, A = r_ext.shape
    if _accel.USE_NUMBA:
        best = np.empty(S)
        arg = np.empty(S, dtype=np.int64)
        _extended_backup_loop(h, coef, keys_p, base, wsum, sizes, r_ext, best, arg)
        return best, arg
    e = _extended_expectations_numpy(h, keys_p, base, wsum, sizes)
    q = r_ext[:, :, None] + coef * e  # (S, A, T)
    q = np.swapaxes(q, 1, 2).reshape(S, S * A)
    return q.max(axis=1), q.argmax(axis=1)


# --- extended-MDP fixed-policy sweep -------------------------------------------


@jit
def _extended_evaluate_loop(h, coef, keys_p, base, wsum, sizes, r_ext, policy, out):
    S, A = r_ext.shape
    m = keys_p.shape[0]
    buf = np.empty(S)
    for s in range(S):
        ext = policy[s]
        a = ext % A
        t = ext // A
        for k in range(S):
            buf[k] = h[k]
        length = S
        for i in range(m):
            si = sizes[i]
            t_i = t % si
            t = t // si
            rest = length // si
            key = keys_p[i, s, a]
            ws = wsum[i, key]
            # Reading row r only touches entries at or after r * si, so in place is safe.
            for r in range(rest):
                off = r * si
                total = ws * buf[off + t_i]
                for v in range(si):
                    total += base[i, key, v] * buf[off + v]
                buf[r] = total
            length = rest
        out[s] = r_ext[s, a] + coef * buf[0]


def _extended_evaluate_numpy(h, coef, keys_p, base, wsum, sizes, r_ext, policy):
    S, A = r_ext.shape
    m = keys_p.shape[0]
    states = np.arange(S)
    a = policy % A
    t = policy // A
    g = np.broadcast_to(h, (S, S))
    length = S
    for i in range(m):
        si = int(sizes[i])
        t_i = t % si
        t = t // si
        length //= si
        keys = keys_p[i, states, a]
        rows = base[i, keys, :si].copy()
        rows[states, t_i] += wsum[i, keys]
        g = np.einsum("srv,sv->sr", g.reshape(S, length, si), rows)
    return r_ext[states, a] + coef * g[:, 0]


def extended_evaluate(h, coef, keys_p, base, wsum, sizes, r_ext, policy):
    """``r_ext + coef * E[h]`` under a fixed flat extended policy."""
    if _accel.USE_NUMBA:
        out = np.empty(r_ext.shape[0])
        _extended_evaluate_loop(h, coef, keys_p, base, wsum, sizes, r_ext, policy, out)
        return out
    return _extended_evaluate_numpy(h, coef, keys_p, base, wsum, sizes, r_ext, policy)
