"""Accumulated-uncertainty truncation, pessimistic rewards and the exact
tabular truncating MDP.

Exact construction
------------------
Along a trajectory the discounted accumulated uncertainty is
``U_t = sum_{i<=t} gamma**i * u(s_i, a_i)`` and step ``t`` is admitted while
``U_t <= epsilon``. Writing the remaining budget in step-``t`` units,
``b_t = (epsilon - U_{t-1}) / gamma**t``, step ``t`` is admitted iff
``u(s_t, a_t) <= b_t`` and then ``b_{t+1} = (b_t - u) / gamma``. The pair
``(s, b)`` is therefore a time-homogeneous Markov state. Budgets at or above
``u_max / (1 - gamma)`` can never be exhausted and collapse into one "safe"
bin; below that, ``b`` lives on a grid of width ``epsilon / resolution`` and
is always rounded *down*, so the discretised process truncates no later than
the continuous one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .envs import TabularMDP, check_simplex
from .errors import DataError, NumericError, ParameterError

ACCUMULATION_MODES = ("undiscounted", "discounted")
QUANTIFIERS = ("mopo", "morel")


@dataclass(frozen=True)
class TruncationConfig:
    alpha: float = 2.0
    lambda_pen: float = 1.0
    kappa: float = 0.0
    gamma: float = 0.99
    horizon_h: int = 5
    accumulation_mode: str = "undiscounted"
    quantifier: str = "mopo"
    # follow Eq.-5 literally in the generator: charge kappa on the last
    # admitted transition of a truncated trajectory
    apply_kappa_to_last_admitted: bool = False
    # the base learner already subtracts lambda*u (TATU+MOPO); keep only kappa
    base_penalizes_reward: bool = False

    def __post_init__(self):
        if not self.alpha >= 1.0:
            raise ParameterError(f"alpha must be >= 1, got {self.alpha}")
        if self.lambda_pen < 0 or self.kappa < 0:
            raise ParameterError("lambda_pen and kappa must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in [0, 1), got {self.gamma}")
        if int(self.horizon_h) != self.horizon_h or self.horizon_h < 1:
            raise ParameterError("horizon_h must be a positive integer")
        if self.accumulation_mode not in ACCUMULATION_MODES:
            raise ParameterError(f"accumulation_mode must be one of {ACCUMULATION_MODES}")
        if self.quantifier not in QUANTIFIERS:
            raise ParameterError(f"quantifier must be one of {QUANTIFIERS}")

    def step_weights(self, n: int | None = None) -> np.ndarray:
        n = self.horizon_h if n is None else n
        if self.accumulation_mode == "discounted":
            return self.gamma ** np.arange(n, dtype=np.float64)
        return np.ones(n)


@dataclass(frozen=True)
class TruncationState:
    u_accum: float = 0.0
    step_t: int = 0
    truncated: bool = False


@dataclass(frozen=True)
class Threshold:
    epsilon: float
    source_max_u: float
    alpha_used: float
    quantifier: str = "mopo"

    @classmethod
    def from_max(cls, max_u: float, alpha: float, quantifier: str = "mopo") -> "Threshold":
        if not alpha >= 1.0:
            raise ParameterError(f"alpha must be >= 1, got {alpha}")
        if not max_u >= 0:
            raise ParameterError("maximum uncertainty must be non-negative")
        return cls(max_u / alpha, max_u, alpha, quantifier)


def compute_threshold(ensemble, dataset, config: TruncationConfig) -> Threshold:
    """``epsilon = max_i u(s_i, a_i) / alpha`` over every pair in ``dataset``."""
    from .dynamics import dataset_max_uncertainty

    max_u = dataset_max_uncertainty(ensemble, dataset, config.quantifier)
    return Threshold.from_max(max_u, config.alpha, config.quantifier)


def accumulate_step(state: TruncationState, u_t: float, config: TruncationConfig,
                    epsilon: float | None = None) -> TruncationState:
    """Add one step's uncertainty to the running total.

    Discounted mode adds ``gamma**t * u_t`` with ``t`` the step index (from 0);
    undiscounted mode adds ``u_t``. With ``epsilon`` given, the truncation
    latch is updated as well.
    """
    if u_t < 0:
        raise ParameterError(f"uncertainty must be non-negative, got {u_t}")
    if config.accumulation_mode == "discounted":
        inc = config.gamma ** state.step_t * u_t
    else:
        inc = u_t
    acc = state.u_accum + inc
    truncated = state.truncated
    if epsilon is not None:
        truncated = truncated or bool(truncation_indicator(acc, epsilon))
    return TruncationState(acc, state.step_t + 1, truncated)


def truncation_indicator(u_accum: float, epsilon: float) -> int:
    return 0 if u_accum <= epsilon else 1


def pessimistic_reward(r, u, config: TruncationConfig, truncated: bool = False):
    """``r - lambda*u``, minus ``kappa`` more at a truncation state."""
    if np.any(np.asarray(u) < 0):
        raise ParameterError("uncertainty must be non-negative")
    lam = 0.0 if config.base_penalizes_reward else config.lambda_pen
    out = r - lam * u
    if truncated:
        out = out - config.kappa
    return out


# ---------------------------------------------------------------------------
# exact tabular truncating MDP
# ---------------------------------------------------------------------------

DEFAULT_RESOLUTION = 1000
MAX_BINS = 2_000_000
DIRECT_SOLVE_MAX = 4000


def pairwise_tv(P_a: np.ndarray, P_b: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(P_a - P_b).sum(axis=-1)


@dataclass(eq=False)
class BudgetGrid:
    """Budget discretisation shared by a pair of truncating MDPs."""

    epsilon: float
    gamma: float
    u_max: float
    resolution: int
    n_grid: int          # bins 0..n_grid-1 hold values epsilon * j / resolution
    start_bin: int

    @property
    def safe(self) -> int:
        return self.n_grid

    @property
    def exhausted(self) -> int:
        return self.n_grid + 1

    @property
    def n_bins(self) -> int:
        return self.n_grid + 2

    @classmethod
    def build(cls, epsilon, gamma, u_max, resolution=DEFAULT_RESOLUTION, max_bins=MAX_BINS):
        if not epsilon >= 0:
            raise ParameterError("epsilon must be non-negative")
        if resolution < 1:
            raise ParameterError("resolution must be >= 1")
        b_safe = u_max / (1.0 - gamma)
        if u_max == 0 or epsilon >= b_safe or math.isinf(epsilon):
            return cls(float(epsilon), gamma, u_max, resolution, 0, 0)
        if epsilon == 0:
            return cls(0.0, gamma, u_max, resolution, 1, 0)
        n_grid = math.ceil(b_safe / epsilon * resolution)
        if n_grid > max_bins:
            # coarsen so that at least one grid step fits under epsilon
            resolution = max(1, int(max_bins * epsilon / b_safe))
            n_grid = math.ceil(b_safe / epsilon * resolution)
        return cls(float(epsilon), gamma, u_max, int(resolution), int(n_grid), int(resolution))

    def values(self) -> np.ndarray:
        j = np.arange(self.n_grid, dtype=np.float64)
        return self.epsilon * (j / self.resolution)

    def next_bins(self, u: np.ndarray, truncate: bool = True) -> np.ndarray:
        """Successor bin for every ``(s, a, bin)``; ``-1`` marks truncation."""
        S, A = u.shape
        nxt = np.empty((S, A, self.n_bins), dtype=np.int64)
        nxt[:, :, self.safe] = self.safe
        nxt[:, :, self.exhausted] = self.exhausted
        if self.n_grid:
            v = self.values()[None, None, :]
            uu = u[:, :, None]
            admitted = uu <= v
            if self.gamma > 0:
                b_next = (v - uu) / self.gamma
            else:
                b_next = np.where(admitted, np.inf, -1.0)
            if self.epsilon == 0:
                j = np.zeros_like(b_next, dtype=np.int64)
            else:
                with np.errstate(invalid="ignore"):
                    j = np.floor(b_next * self.resolution / self.epsilon)
                j = np.clip(np.nan_to_num(j, nan=0.0), 0, self.n_grid).astype(np.int64)
                # never round a budget up
                over = (j < self.n_grid) & (self.epsilon * (j / self.resolution) > b_next)
                j = j - over
                j = np.where(b_next >= self.u_max / (1.0 - self.gamma), self.safe, np.minimum(j, self.n_grid - 1))
            fail = self.exhausted if not truncate else -1
            nxt[:, :, : self.n_grid] = np.where(admitted, j, fail)
        return nxt


@dataclass(eq=False)
class PessimisticTabularMDP:
    """Truncating, reward-penalised MDP over ``(state, budget-bin)`` pairs.

    With ``truncate=False`` the same budget bookkeeping runs without ever
    stopping (budgets that run out move to an "exhausted" bin); this is used to
    evaluate budget-dependent policies in the untruncated MDP.
    """

    P: np.ndarray
    rho0: np.ndarray
    r: np.ndarray            # raw rewards r(s, a)
    u: np.ndarray            # per-pair uncertainty
    lambda_pen: float
    kappa: float
    gamma: float
    grid: BudgetGrid
    truncate: bool = True
    ext_s: np.ndarray = field(init=False, repr=False)
    ext_j: np.ndarray = field(init=False, repr=False)
    index: np.ndarray = field(init=False, repr=False)
    nxt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S, A = self.u.shape
        self.nxt = self.grid.next_bins(self.u, truncate=self.truncate)
        reach = kernels.budget_reachable(self.nxt, self.P > 0, self.rho0 > 0, self.grid.start_bin)
        self.ext_s, self.ext_j = np.nonzero(reach)
        self.index = np.full((S, self.grid.n_bins), -1, dtype=np.int64)
        self.index[self.ext_s, self.ext_j] = np.arange(self.ext_s.size)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def n_extended(self) -> int:
        return self.ext_s.size

    @property
    def r_pen(self) -> np.ndarray:
        return self.r - self.lambda_pen * self.u

    def _action_blocks(self):
        """Per action: admitted mask, sparse successor matrix, reward vector."""
        m, S = self.n_extended, self.n_states
        out = []
        for a in range(self.n_actions):
            jn = self.nxt[self.ext_s, a, self.ext_j]
            adm = jn >= 0
            rows = np.flatnonzero(adm)
            s_rows = self.ext_s[rows]
            cols = self.index[:, jn[rows]].T            # (n_rows, S)
            probs = self.P[s_rows, a, :]                 # (n_rows, S)
            keep = probs > 0
            if np.any(cols[keep] < 0):
                raise NumericError("successor outside the reachable set")
            T = sp.csr_matrix(
                (probs[keep], (np.repeat(rows, S).reshape(-1, S)[keep], cols[keep])), shape=(m, m)
            )
            rew = self.r_pen[self.ext_s, a] - self.kappa * (~adm)
            out.append((adm, T, rew))
        return out

    def _policy_weights(self, policy) -> np.ndarray:
        """``(m, A)`` action probabilities on extended states."""
        if isinstance(policy, BudgetPolicy):
            w = np.zeros((self.n_extended, self.n_actions))
            w[np.arange(self.n_extended), policy.actions[self.ext_s, self.ext_j]] = 1.0
            return w
        pi = np.asarray(policy, dtype=np.float64)
        if pi.shape != (self.n_states, self.n_actions):
            raise ParameterError("policy must have shape (S, A) or be a BudgetPolicy")
        check_simplex(pi, "policy", tol=1e-9)
        return pi[self.ext_s]

    def values(self, policy, blocks=None, x0=None) -> np.ndarray:
        """Solve ``(I - gamma T_pi) v = r_pi`` on the extended states.

        Small systems use a direct sparse solve. Large ones use restarted
        GMRES (``x0`` warm-starts it), since LU fill-in on the budget chain
        grows badly; either way the residual is checked.
        """
        blocks = self._action_blocks() if blocks is None else blocks
        w = self._policy_weights(policy)
        m = self.n_extended
        T = sp.csr_matrix((m, m))
        rhs = np.zeros(m)
        for a, (_, Ta, ra) in enumerate(blocks):
            T = T + sp.diags(w[:, a]) @ Ta
            rhs += w[:, a] * ra
        M = (sp.identity(m, format="csr") - self.gamma * T).tocsr()
        scale = max(1.0, float(np.max(np.abs(rhs)))) if m else 1.0
        if m <= DIRECT_SOLVE_MAX:
            v = np.atleast_1d(np.asarray(spla.spsolve(M.tocsc(), rhs), dtype=np.float64))
        else:
            v, _ = spla.gmres(M, rhs, x0=x0, rtol=1e-15, atol=1e-13 * scale, restart=60, maxiter=500)
        resid = float(np.max(np.abs(M @ v - rhs))) if m else 0.0
        if not np.all(np.isfinite(v)) or resid > 1e-10 * scale:
            raise NumericError(f"extended policy evaluation failed (residual {resid:.3e})")
        return v

    def start_values(self, v: np.ndarray) -> np.ndarray:
        return v[self.index[:, self.grid.start_bin]]

    def evaluate(self, policy) -> float:
        """Exact discounted return from ``rho0``."""
        v = self.values(policy)
        support = self.rho0 > 0
        return float(self.rho0[support] @ self.start_values(v)[support])

    def optimal(self, max_iter: int = 1000):
        """Policy iteration over budget-dependent deterministic policies.

        Returns ``(J*, BudgetPolicy)``. Greedy ties keep the incumbent action,
        otherwise the lowest index wins.
        """
        blocks = self._action_blocks()
        m, A = self.n_extended, self.n_actions
        act = np.zeros(m, dtype=np.int64)
        v = None
        for _ in range(max_iter):
            pol = self._as_policy(act)
            v = self.values(pol, blocks, x0=v)
            q = np.stack([ra + self.gamma * (Ta @ v) for (_, Ta, ra) in blocks], axis=1)
            best = q.max(axis=1)
            incumbent_ok = q[np.arange(m), act] >= best - 1e-12 * max(1.0, np.abs(best).max())
            new = np.where(incumbent_ok, act, q.argmax(axis=1))
            if np.array_equal(new, act):
                support = self.rho0 > 0
                return float(self.rho0[support] @ self.start_values(v)[support]), pol
            act = new
        raise NumericError("policy iteration did not converge")

    def _as_policy(self, act: np.ndarray) -> "BudgetPolicy":
        table = np.zeros((self.n_states, self.grid.n_bins), dtype=np.int64)
        table[self.ext_s, self.ext_j] = act
        return BudgetPolicy(table)

    def monte_carlo(self, policy: np.ndarray, n_episodes: int, seed: int, horizon: int | None = None,
                    chunk: int = 20_000, impl=None):
        """Monte-Carlo returns with the exact (un-gridded) discounted budget.

        Independent of the grid construction; used as an oracle for it.
        """
        if horizon is None:
            horizon = 1 if self.gamma == 0 else int(math.ceil(math.log(1e-12) / math.log(self.gamma)))
        rng = np.random.default_rng(seed)
        cdf_P = np.cumsum(self.P, axis=-1)
        cdf_pi = np.cumsum(np.asarray(policy, dtype=np.float64), axis=-1)
        cdf_rho = np.cumsum(self.rho0)
        eps = self.grid.epsilon if self.truncate else math.inf
        out = []
        done = 0
        while done < n_episodes:
            k = min(chunk, n_episodes - done)
            starts = rng.random(k)
            unif = rng.random((k, horizon, 2))
            g, _, _ = kernels.budget_mc_returns(cdf_P, cdf_pi, cdf_rho, self.r_pen, self.u, self.kappa,
                                                self.gamma, eps, starts, unif, impl=impl)
            out.append(g)
            done += k
        return np.concatenate(out)


@dataclass(frozen=True, eq=False)
class BudgetPolicy:
    """Deterministic policy over ``(state, budget-bin)``; ``actions[s, j]``."""

    actions: np.ndarray


def build_pessimistic_tabular(
    true_mdp: TabularMDP,
    learned_P: np.ndarray,
    learned_rho0: np.ndarray,
    lambda_pen: float,
    kappa: float,
    epsilon: float,
    resolution: int = DEFAULT_RESOLUTION,
):
    """Build ``(M_p, M_hat_p)``: truncating MDPs under the true and the learned
    dynamics, sharing rewards ``r - lambda*u`` (``- kappa`` at truncation) with
    ``u(s, a) = TV(P_hat(.|s,a), P(.|s,a))``."""
    learned_P = np.asarray(learned_P, dtype=np.float64)
    learned_rho0 = np.asarray(learned_rho0, dtype=np.float64)
    if learned_P.shape != true_mdp.P.shape:
        raise DataError(f"learned_P has shape {learned_P.shape}, expected {true_mdp.P.shape}")
    if learned_rho0.shape != true_mdp.rho0.shape:
        raise DataError("learned_rho0 does not match the state count")
    check_simplex(learned_P, "learned_P", tol=1e-9)
    check_simplex(learned_rho0, "learned_rho0", tol=1e-9)
    if lambda_pen < 0 or kappa < 0:
        raise ParameterError("lambda_pen and kappa must be non-negative")
    u = pairwise_tv(learned_P, true_mdp.P)
    grid = BudgetGrid.build(epsilon, true_mdp.gamma, float(u.max()), resolution)
    common = dict(r=true_mdp.r, u=u, lambda_pen=float(lambda_pen), kappa=float(kappa),
                  gamma=true_mdp.gamma, grid=grid)
    m_p = PessimisticTabularMDP(P=true_mdp.P, rho0=true_mdp.rho0, **common)
    m_hat = PessimisticTabularMDP(P=learned_P, rho0=learned_rho0, **common)
    return m_p, m_hat


def tracking_mdp(pmdp: PessimisticTabularMDP, P: np.ndarray, rho0: np.ndarray) -> PessimisticTabularMDP:
    """Untruncated, unpenalised twin of ``pmdp`` that still tracks the budget."""
    return PessimisticTabularMDP(P=P, rho0=rho0, r=pmdp.r, u=pmdp.u, lambda_pen=0.0, kappa=0.0,
                                 gamma=pmdp.gamma, grid=pmdp.grid, truncate=False)


__all__ = [
    "TruncationConfig", "TruncationState", "Threshold", "compute_threshold", "accumulate_step",
    "truncation_indicator", "pessimistic_reward", "build_pessimistic_tabular", "PessimisticTabularMDP",
    "BudgetGrid", "BudgetPolicy", "pairwise_tv", "tracking_mdp",
]
