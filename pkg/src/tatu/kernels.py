"""Hot inner loops.

Every public kernel takes an ``impl`` argument (``None`` follows the package
backend, or force ``"numba"`` / ``"numpy"``). Random numbers are always drawn
by the caller and passed in, which keeps the two paths bit-for-bit identical.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# categorical sampling by inverse CDF
# ---------------------------------------------------------------------------


@njit
def _inv_cdf(cdf, u):
    n = cdf.shape[0]
    k = 0
    while k < n - 1 and u >= cdf[k]:
        k += 1
    return k


def _inv_cdf_rows(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    n = cdf_rows.shape[-1]
    return np.minimum((u[:, None] >= cdf_rows).sum(axis=1), n - 1)


def _pick(impl: str | None) -> str:
    if impl is None:
        return _accel.backend()
    if impl not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel implementation {impl!r}")
    return impl


# ---------------------------------------------------------------------------
# tabular behaviour rollouts
# ---------------------------------------------------------------------------


@njit
def _tabular_rollout_loop(cdf_P, cdf_pi, cdf_rho, episode_len, unif):
    n = unif.shape[0]
    states = np.empty(n, np.int64)
    actions = np.empty(n, np.int64)
    nexts = np.empty(n, np.int64)
    dones = np.empty(n, np.bool_)
    s = 0
    for i in range(n):
        if i % episode_len == 0:
            s = _inv_cdf(cdf_rho, unif[i, 0])
        a = _inv_cdf(cdf_pi[s], unif[i, 1])
        sn = _inv_cdf(cdf_P[s, a], unif[i, 2])
        states[i] = s
        actions[i] = a
        nexts[i] = sn
        dones[i] = (i + 1) % episode_len == 0
        s = sn
    return states, actions, nexts, dones


def _tabular_rollout_numpy(cdf_P, cdf_pi, cdf_rho, episode_len, unif):
    n = unif.shape[0]
    n_ep = -(-n // episode_len)
    padded = np.zeros((n_ep * episode_len, 3))
    padded[:n] = unif
    U = padded.reshape(n_ep, episode_len, 3)
    S = np.empty((n_ep, episode_len), np.int64)
    A = np.empty_like(S)
    N = np.empty_like(S)
    s = _inv_cdf_rows(np.broadcast_to(cdf_rho, (n_ep, cdf_rho.shape[0])), U[:, 0, 0])
    for t in range(episode_len):
        a = _inv_cdf_rows(cdf_pi[s], U[:, t, 1])
        sn = _inv_cdf_rows(cdf_P[s, a], U[:, t, 2])
        S[:, t], A[:, t], N[:, t] = s, a, sn
        s = sn
    idx = np.arange(n)
    dones = (idx + 1) % episode_len == 0
    return S.reshape(-1)[:n], A.reshape(-1)[:n], N.reshape(-1)[:n], dones


def tabular_rollout(cdf_P, cdf_pi, cdf_rho, episode_len, unif, impl=None):
    """Roll a stationary policy through a tabular MDP with periodic resets.

    ``unif`` has shape ``(n, 3)``: reset, action and next-state uniforms per
    step. Returns ``(states, actions, next_states, dones)``.
    """
    if _pick(impl) == "numba":
        return _tabular_rollout_loop(cdf_P, cdf_pi, cdf_rho, int(episode_len), unif)
    return _tabular_rollout_numpy(cdf_P, cdf_pi, cdf_rho, int(episode_len), unif)


# ---------------------------------------------------------------------------
# Monte-Carlo returns of an epsilon-pessimistic tabular MDP (continuous budget)
# ---------------------------------------------------------------------------


@njit
def _budget_mc_loop(cdf_P, cdf_pi, cdf_rho, r_pen, u, kappa, gamma, epsilon, starts, unif):
    n, horizon = unif.shape[0], unif.shape[1]
    returns = np.empty(n)
    lengths = np.empty(n, np.int64)
    truncated = np.zeros(n, np.bool_)
    for e in range(n):
        s = _inv_cdf(cdf_rho, starts[e])
        acc = 0.0
        g = 0.0
        disc = 1.0
        t = 0
        while t < horizon:
            a = _inv_cdf(cdf_pi[s], unif[e, t, 0])
            acc = acc + disc * u[s, a]
            if acc <= epsilon:
                g = g + disc * r_pen[s, a]
                s = _inv_cdf(cdf_P[s, a], unif[e, t, 1])
                disc = disc * gamma
                t += 1
            else:
                g = g + disc * (r_pen[s, a] - kappa)
                truncated[e] = True
                break
        returns[e] = g
        lengths[e] = t
    return returns, lengths, truncated


def _budget_mc_numpy(cdf_P, cdf_pi, cdf_rho, r_pen, u, kappa, gamma, epsilon, starts, unif):
    n, horizon = unif.shape[0], unif.shape[1]
    s = _inv_cdf_rows(np.broadcast_to(cdf_rho, (n, cdf_rho.shape[0])), starts)
    acc = np.zeros(n)
    g = np.zeros(n)
    disc = np.ones(n)
    lengths = np.zeros(n, np.int64)
    truncated = np.zeros(n, bool)
    alive = np.arange(n)
    for t in range(horizon):
        if alive.size == 0:
            break
        sa = s[alive]
        a = _inv_cdf_rows(cdf_pi[sa], unif[alive, t, 0])
        acc[alive] = acc[alive] + disc[alive] * u[sa, a]
        ok = acc[alive] <= epsilon
        keep, stop = alive[ok], alive[~ok]
        g[keep] = g[keep] + disc[keep] * r_pen[sa[ok], a[ok]]
        g[stop] = g[stop] + disc[stop] * (r_pen[sa[~ok], a[~ok]] - kappa)
        truncated[stop] = True
        s[keep] = _inv_cdf_rows(cdf_P[sa[ok], a[ok]], unif[keep, t, 1])
        disc[keep] = disc[keep] * gamma
        lengths[keep] += 1
        alive = keep
    return g, lengths, truncated


def budget_mc_returns(cdf_P, cdf_pi, cdf_rho, r_pen, u, kappa, gamma, epsilon, starts, unif, impl=None):
    """Sample discounted returns of the truncating, reward-penalized process.

    ``starts`` has shape ``(n,)`` and ``unif`` shape ``(n, horizon, 2)``.
    Accumulated uncertainty uses the exact discounted sum; an episode that
    survives ``horizon`` steps is cut without penalty.
    """
    args = (cdf_P, cdf_pi, cdf_rho, r_pen, u, float(kappa), float(gamma), float(epsilon), starts, unif)
    if _pick(impl) == "numba":
        return _budget_mc_loop(*args)
    return _budget_mc_numpy(*args)


# ---------------------------------------------------------------------------
# reachability over (state, budget-bin) pairs
# ---------------------------------------------------------------------------


@njit
def _reach_loop(nxt, support, start_mask, j0):
    S, A, nb = nxt.shape
    reach = np.zeros((S, nb), np.bool_)
    stack_s = np.empty(S * nb, np.int64)
    stack_j = np.empty(S * nb, np.int64)
    top = 0
    for s in range(S):
        if start_mask[s]:
            reach[s, j0] = True
            stack_s[top] = s
            stack_j[top] = j0
            top += 1
    while top > 0:
        top -= 1
        s = stack_s[top]
        j = stack_j[top]
        for a in range(A):
            jn = nxt[s, a, j]
            if jn < 0:
                continue
            for sp in range(S):
                if support[s, a, sp] and not reach[sp, jn]:
                    reach[sp, jn] = True
                    stack_s[top] = sp
                    stack_j[top] = jn
                    top += 1
    return reach


def _reach_numpy(nxt, support, start_mask, j0):
    S, A, nb = nxt.shape
    reach = np.zeros((S, nb), bool)
    reach[start_mask, j0] = True
    frontier = reach.copy()
    while frontier.any():
        new = np.zeros_like(reach)
        for s in range(S):
            js = np.flatnonzero(frontier[s])
            if js.size == 0:
                continue
            for a in range(A):
                jn = nxt[s, a, js]
                jn = jn[jn >= 0]
                if jn.size:
                    new[np.ix_(support[s, a], np.unique(jn))] = True
        frontier = new & ~reach
        reach |= new
    return reach


def budget_reachable(nxt, support, start_mask, j0, impl=None):
    """Boolean ``(S, n_bins)`` mask of budget states reachable from ``(start, j0)``.

    ``nxt[s, a, j]`` is the successor bin or ``-1`` when the step truncates;
    ``support[s, a, s']`` marks nonzero transition probability.
    """
    nxt = np.ascontiguousarray(nxt, dtype=np.int64)
    support = np.ascontiguousarray(support, dtype=np.bool_)
    start_mask = np.ascontiguousarray(start_mask, dtype=np.bool_)
    if _pick(impl) == "numba":
        return _reach_loop(nxt, support, start_mask, int(j0))
    return _reach_numpy(nxt, support, start_mask, int(j0))


# ---------------------------------------------------------------------------
# truncation scan over pre-computed per-step uncertainties
# ---------------------------------------------------------------------------


@njit
def _trunc_scan_loop(u, weights, epsilon):
    n, h = u.shape
    lengths = np.full(n, h, np.int64)
    cum = np.empty((n, h))
    for i in range(n):
        c = 0.0
        latched = False
        for j in range(h):
            c = c + weights[j] * u[i, j]
            cum[i, j] = c
            if not latched and c > epsilon:
                lengths[i] = j
                latched = True
    return lengths, cum


def _trunc_scan_numpy(u, weights, epsilon):
    n, h = u.shape
    cum = np.cumsum(weights[None, :] * u, axis=1)
    over = cum > epsilon
    lengths = np.where(over.any(axis=1), over.argmax(axis=1), h).astype(np.int64)
    return lengths, cum


def truncation_scan(u, weights, epsilon, impl=None):
    """Admitted prefix length and running accumulated uncertainty per row.

    Row ``i`` admits steps ``0..lengths[i]-1``: the first step whose running
    sum exceeds ``epsilon`` and everything after it is rejected.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if _pick(impl) == "numba":
        return _trunc_scan_loop(u, weights, float(epsilon))
    return _trunc_scan_numpy(u, weights, float(epsilon))
