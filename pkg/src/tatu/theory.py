"""Exact evaluation on small MDPs and numerical checks of the truncation
performance bounds (theorem, two lemmas, two corollaries)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .envs import (
    TabularMDP,
    check_simplex,
    collect_dataset,
    empirical_model,
    make_tabular_mdp,
    random_policy,
    uniform_policy,
)
from .errors import NumericError, ParameterError
from .truncation import (
    DEFAULT_RESOLUTION,
    BudgetPolicy,
    PessimisticTabularMDP,
    build_pessimistic_tabular,
    pairwise_tv,
    tracking_mdp,
)

BOUND_TOL = 1e-9


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ParameterError("tv_distance expects two vectors of equal length")
    check_simplex(p, "p", tol=1e-9)
    check_simplex(q, "q", tol=1e-9)
    return float(0.5 * np.abs(p - q).sum())


def policy_values(P: np.ndarray, r: np.ndarray, pi: np.ndarray, gamma: float) -> np.ndarray:
    """``v = (I - gamma P_pi)^-1 r_pi`` by a dense linear solve."""
    P_pi = np.einsum("sa,sat->st", pi, P)
    r_pi = (pi * r).sum(axis=1)
    M = np.eye(P.shape[0]) - gamma * P_pi
    try:
        v = np.linalg.solve(M, r_pi)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular evaluation system: {exc}") from exc
    resid = np.max(np.abs(M @ v - r_pi))
    if resid > 1e-12 * max(1.0, np.max(np.abs(r_pi)) / (1.0 - gamma)):
        raise NumericError(f"policy evaluation residual {resid:.3e}")
    return v


def exact_return(mdp, policy, rho0=None, gamma=None) -> float:
    """``J = rho0^T (I - gamma P_pi)^-1 r_pi``.

    ``mdp`` is a :class:`TabularMDP` or a :class:`PessimisticTabularMDP`; the
    latter also accepts budget-dependent policies.
    """
    if isinstance(mdp, PessimisticTabularMDP):
        return mdp.evaluate(policy)
    rho0 = mdp.rho0 if rho0 is None else np.asarray(rho0, dtype=np.float64)
    gamma = mdp.gamma if gamma is None else gamma
    pi = np.asarray(policy, dtype=np.float64)
    check_simplex(pi, "policy", tol=1e-9)
    return float(rho0 @ policy_values(mdp.P, mdp.r, pi, gamma))


def value_iteration(P: np.ndarray, r: np.ndarray, gamma: float, tol: float = 1e-12, max_iter: int = 1_000_000):
    """Optimal ``(V, Q)`` by repeated Bellman backups until the sup-norm step < tol."""
    V = np.zeros(P.shape[0])
    for _ in range(max_iter):
        Q = r + gamma * P @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            return V_new, r + gamma * P @ V_new
        V = V_new
    raise NumericError("value iteration did not converge")


def policy_iteration(mdp: TabularMDP, max_iter: int = 1000):
    """Deterministic optimal policy as an ``(S, A)`` one-hot matrix, plus values."""
    S, A = mdp.n_states, mdp.n_actions
    act = np.zeros(S, dtype=np.int64)
    for _ in range(max_iter):
        pi = np.eye(A)[act]
        v = policy_values(mdp.P, mdp.r, pi, mdp.gamma)
        q = mdp.r + mdp.gamma * mdp.P @ v
        best = q.max(axis=1)
        keep = q[np.arange(S), act] >= best - 1e-12 * max(1.0, np.abs(best).max())
        new = np.where(keep, act, q.argmax(axis=1))
        if np.array_equal(new, act):
            return pi, v
        act = new
    raise NumericError("policy iteration did not converge")


# ---------------------------------------------------------------------------
# bound reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    J_true: float
    J_pess_true_dyn: float
    J_pess_learned: float
    r_bar: float
    r_max: float
    lambda_pen: float
    kappa: float
    u_max: float
    gamma: float
    tv_rho0: float
    epsilon_used: float
    lower_bound_value: float
    upper_bound_value: float
    lower_slack: float
    upper_slack: float
    lemma1_slack: float
    lemma2_lower_slack: float
    lemma2_upper_slack: float
    theorem1_lower_ok: bool
    theorem1_upper_ok: bool
    lemma1_ok: bool
    lemma2_ok: bool
    tol: float = BOUND_TOL

    @property
    def all_ok(self) -> bool:
        return self.theorem1_lower_ok and self.theorem1_upper_ok and self.lemma1_ok and self.lemma2_ok

    def recheck(self) -> bool:
        """Recompute every verdict from the stored returns; True if consistent."""
        fresh = _bound_report(self.J_true, self.J_pess_true_dyn, self.J_pess_learned, self.r_max,
                              self.lambda_pen, self.kappa, self.u_max, self.gamma, self.tv_rho0,
                              self.epsilon_used, self.tol)
        return fresh == self

    def to_dict(self) -> dict:
        return asdict(self)


def r_bar(r_max: float, lambda_pen: float, u_max: float, kappa: float) -> float:
    return r_max + lambda_pen * u_max + kappa


def _bound_report(J, J_p, J_hat, r_max, lam, kappa, u_max, gamma, tv0, eps, tol) -> BoundReport:
    rb = r_bar(r_max, lam, u_max, kappa)
    horizon = 1.0 / (1.0 - gamma)
    init_term = 2.0 * rb * horizon * tv0
    lower = J - init_term - rb * eps - rb * horizon
    upper = J + init_term + rb * eps
    lower_slack = J_hat - lower
    upper_slack = upper - J_hat
    lemma1_slack = init_term + rb * eps - abs(J_p - J_hat)
    l2_lo = J_p - (J - rb * horizon)
    l2_hi = J - J_p
    return BoundReport(
        J_true=J, J_pess_true_dyn=J_p, J_pess_learned=J_hat, r_bar=rb, r_max=r_max, lambda_pen=lam,
        kappa=kappa, u_max=u_max, gamma=gamma, tv_rho0=tv0, epsilon_used=eps,
        lower_bound_value=lower, upper_bound_value=upper, lower_slack=lower_slack,
        upper_slack=upper_slack, lemma1_slack=lemma1_slack, lemma2_lower_slack=l2_lo,
        lemma2_upper_slack=l2_hi,
        theorem1_lower_ok=bool(lower_slack >= -tol), theorem1_upper_ok=bool(upper_slack >= -tol),
        lemma1_ok=bool(lemma1_slack >= -tol), lemma2_ok=bool(l2_lo >= -tol and l2_hi >= -tol), tol=tol,
    )


def _pessimistic_pair(true_mdp, learned_P, learned_rho0, lambda_pen, kappa, epsilon, resolution):
    m_p, m_hat = build_pessimistic_tabular(true_mdp, learned_P, learned_rho0, lambda_pen, kappa,
                                           epsilon, resolution)
    return m_p, m_hat


def check_theorem1(true_mdp: TabularMDP, learned_P, learned_rho0, policy, lambda_pen: float,
                   kappa: float, epsilon: float, resolution: int = DEFAULT_RESOLUTION,
                   tol: float = BOUND_TOL) -> BoundReport:
    """Exact returns on M, M_p and M_hat_p, and the bound verdicts built from them."""
    m_p, m_hat = _pessimistic_pair(true_mdp, learned_P, learned_rho0, lambda_pen, kappa, epsilon, resolution)
    J = exact_return(true_mdp, policy)
    J_p = m_p.evaluate(policy)
    J_hat = m_hat.evaluate(policy)
    u_max = float(m_p.u.max())
    tv0 = tv_distance(true_mdp.rho0, learned_rho0)
    return _bound_report(J, J_p, J_hat, true_mdp.r_max, float(lambda_pen), float(kappa), u_max,
                         true_mdp.gamma, tv0, float(epsilon), tol)


def check_lemmas(true_mdp: TabularMDP, learned_P, learned_rho0, policy, lambda_pen: float,
                 kappa: float, epsilon: float, resolution: int = DEFAULT_RESOLUTION,
                 tol: float = BOUND_TOL) -> BoundReport:
    """Same computation as :func:`check_theorem1`; read ``lemma1_ok`` / ``lemma2_ok``."""
    return check_theorem1(true_mdp, learned_P, learned_rho0, policy, lambda_pen, kappa, epsilon,
                          resolution, tol)


@dataclass(frozen=True)
class CorollaryReport:
    J_opt_true: float          # J(pi*_M, M)
    J_candidate_true: float    # J(pi, M)
    J_opt_pess: float          # J(pi*_{M_hat_p}, M_hat_p)
    J_candidate_pess: float    # J(pi, M_hat_p)
    delta_pi: float
    r_bar: float
    tv_rho0: float
    epsilon_used: float
    gamma: float
    suboptimality: float
    corollary1_bound: float
    corollary1_slack: float
    corollary1_ok: bool
    corollary2_bound: float
    tol: float = BOUND_TOL

    def to_dict(self) -> dict:
        return asdict(self)


def check_corollaries(true_mdp: TabularMDP, learned_P, learned_rho0, candidate, lambda_pen: float,
                      kappa: float, epsilon: float, resolution: int = DEFAULT_RESOLUTION,
                      tol: float = BOUND_TOL) -> CorollaryReport:
    """Sub-optimality transfer check.

    ``candidate`` is an ``(S, A)`` policy, a :class:`BudgetPolicy`, or the
    string ``"optimal"`` for the optimum of the learned truncating MDP.
    """
    m_p, m_hat = _pessimistic_pair(true_mdp, learned_P, learned_rho0, lambda_pen, kappa, epsilon, resolution)
    pi_star, _ = policy_iteration(true_mdp)
    J_opt_true = exact_return(true_mdp, pi_star)
    J_opt_pess, pess_policy = m_hat.optimal()
    if isinstance(candidate, str):
        if candidate != "optimal":
            raise ParameterError(f"unknown candidate {candidate!r}")
        candidate = pess_policy
    if isinstance(candidate, BudgetPolicy):
        J_cand_pess = m_hat.evaluate(candidate)
        J_cand_true = tracking_mdp(m_hat, true_mdp.P, true_mdp.rho0).evaluate(candidate)
    else:
        J_cand_pess = m_hat.evaluate(candidate)
        J_cand_true = exact_return(true_mdp, candidate)
    delta = J_opt_pess - J_cand_pess
    rb = r_bar(true_mdp.r_max, lambda_pen, float(m_p.u.max()), kappa)
    tv0 = tv_distance(true_mdp.rho0, learned_rho0)
    horizon = 1.0 / (1.0 - true_mdp.gamma)
    bound1 = delta + 4.0 * rb * horizon * tv0 + 2.0 * rb * epsilon + rb * horizon
    gap = J_opt_true - J_cand_true
    return CorollaryReport(
        J_opt_true=J_opt_true, J_candidate_true=J_cand_true, J_opt_pess=J_opt_pess,
        J_candidate_pess=J_cand_pess, delta_pi=delta, r_bar=rb, tv_rho0=tv0, epsilon_used=float(epsilon),
        gamma=true_mdp.gamma, suboptimality=gap, corollary1_bound=bound1, corollary1_slack=bound1 - gap,
        corollary1_ok=bool(bound1 - gap >= -tol), corollary2_bound=delta + rb * horizon, tol=tol,
    )


def corollary2_sweep(mdp: TabularMDP, sizes=(100, 1000, 10_000), seed: int = 0, episode_len: int = 10):
    """Count-based models from growing uniform-policy datasets.

    Returns one row per size with the initial-distribution TV distance and the
    mean exact per-pair uncertainty ``TV(P_hat(.|s,a), P(.|s,a))``.
    """
    rows = []
    pi = uniform_policy(mdp.n_states, mdp.n_actions)
    for k, n in enumerate(sizes):
        data = collect_dataset(mdp, pi, int(n), seed=seed + k, episode_len=episode_len)
        P_hat, rho_hat, _ = empirical_model(data, mdp.n_states, mdp.n_actions)
        u = pairwise_tv(P_hat, mdp.P)
        rows.append({"n": int(n), "tv_rho0": tv_distance(mdp.rho0, rho_hat), "mean_u": float(u.mean()),
                     "max_u": float(u.max())})
    return rows


# ---------------------------------------------------------------------------
# randomised instance suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BoundInstance:
    mdp: TabularMDP
    learned_P: np.ndarray
    learned_rho0: np.ndarray
    policy: np.ndarray
    lambda_pen: float
    kappa: float
    epsilon: float


def perturb_rows(p: np.ndarray, weight, rng: np.random.Generator) -> np.ndarray:
    """Mix each row of ``p`` with a fresh Dirichlet(1) row."""
    noise = rng.dirichlet(np.ones(p.shape[-1]), size=p.shape[:-1])
    out = (1.0 - weight) * p + weight * noise
    return out / out.sum(axis=-1, keepdims=True)


def random_instance(seed: int, *, max_states: int = 8, max_actions: int = 4, gammas=(0.9, 0.99),
                    lambda_pen: float = 1.0, kappas=(0.0, 1.0), nonnegative_rewards: bool = True,
                    model_noise=(0.05, 0.3), rho_noise=(0.0, 0.3)) -> BoundInstance:
    """One randomised verification instance.

    The learned model mixes every true row with Dirichlet noise at a random
    weight; ``epsilon`` is the instance's largest per-pair uncertainty.
    """
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    gamma = float(rng.choice(gammas))
    kappa = float(rng.choice(kappas))
    mdp = make_tabular_mdp(S, A, gamma, 1.0, int(rng.integers(2**31)), nonnegative_rewards=nonnegative_rewards)
    w = rng.uniform(*model_noise, size=(S, A, 1))
    learned_P = perturb_rows(mdp.P, w, rng)
    learned_rho0 = perturb_rows(mdp.rho0, rng.uniform(*rho_noise), rng)
    policy = random_policy(S, A, rng)
    eps = float(pairwise_tv(learned_P, mdp.P).max())
    return BoundInstance(mdp, learned_P, learned_rho0, policy, lambda_pen, kappa, eps)


def run_bound_suite(n_instances: int = 100, seed: int = 0, *, corollaries: bool = True,
                    resolution: int = DEFAULT_RESOLUTION, **instance_kw):
    """Evaluate theorem, lemmas and (optionally) corollary 1 on random instances.

    Returns a list of dicts, one per instance, holding both reports.
    """
    out = []
    for i in range(n_instances):
        inst = random_instance(seed * 100_003 + i, **instance_kw)
        rep = check_theorem1(inst.mdp, inst.learned_P, inst.learned_rho0, inst.policy, inst.lambda_pen,
                             inst.kappa, inst.epsilon, resolution)
        row = {"instance": i, "n_states": inst.mdp.n_states, "n_actions": inst.mdp.n_actions,
               "bounds": rep}
        if corollaries:
            row["corollary"] = check_corollaries(inst.mdp, inst.learned_P, inst.learned_rho0, inst.policy,
                                                 inst.lambda_pen, inst.kappa, inst.epsilon, resolution)
        out.append(row)
    return out
