import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tatu.envs import make_tabular_mdp, random_policy, uniform_policy
from tatu.errors import ParameterError
from tatu.theory import exact_return, perturb_rows
from tatu.truncation import (BudgetGrid, Threshold, TruncationConfig, TruncationState, accumulate_step,
                             build_pessimistic_tabular, compute_threshold, pessimistic_reward,
                             truncation_indicator)


class _PlantedU:
    """Stand-in ensemble whose per-point uncertainties are given directly."""

    def __init__(self, u):
        self.u = np.asarray(u, float)

    def uncertainties(self, states, actions, quantifier="mopo", clip=True):
        return self.u[np.asarray(states, int)[:, 0]]


class _Rows:
    def __init__(self, n):
        self.states = np.arange(n)[:, None]
        self.actions = np.zeros((n, 1))

    def __len__(self):
        return self.states.shape[0]


def _threshold(u, alpha):
    return compute_threshold(_PlantedU(u), _Rows(len(u)), TruncationConfig(alpha=alpha))


def test_alpha_one_is_dataset_max():
    u = [0.3, 0.9, 0.1]
    assert _threshold(u, 1.0).epsilon == 0.9


def test_alpha_two_halves_max():
    u = np.random.default_rng(0).random(50)
    assert _threshold(u, 2.0).epsilon == u.max() / 2


def test_planted_values_threshold():
    th = _threshold([0.1, 0.4, 0.25], 2.0)
    assert th.epsilon == 0.2 and th.source_max_u == 0.4 and th.alpha_used == 2.0


def test_alpha_below_one_rejected():
    with pytest.raises(ParameterError):
        Threshold.from_max(1.0, 0.5)
    with pytest.raises(ParameterError):
        TruncationConfig(alpha=0.9)


def test_accumulation_examples():
    assert TruncationState().u_accum == 0
    und = TruncationConfig()
    s = TruncationState()
    for u in (0.1, 0.2):
        s = accumulate_step(s, u, und)
    assert s.u_accum == pytest.approx(0.3, abs=1e-15)
    disc = TruncationConfig(accumulation_mode="discounted", gamma=0.9)
    s = TruncationState()
    for u in (0.1, 0.2):
        s = accumulate_step(s, u, disc)
    assert s.u_accum == pytest.approx(0.28, abs=1e-15)


def test_negative_uncertainty_rejected():
    with pytest.raises(ParameterError):
        accumulate_step(TruncationState(), -0.1, TruncationConfig())
    with pytest.raises(ParameterError):
        pessimistic_reward(1.0, -0.1, TruncationConfig())


def test_indicator_examples():
    assert truncation_indicator(0.2, 0.2) == 0
    assert truncation_indicator(0.2000001, 0.2) == 1
    assert truncation_indicator(0.0, 0.0) == 0
    assert truncation_indicator(0.0, 3.0) == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(0, 3))
def test_latch_never_resets(us, eps):
    cfg = TruncationConfig()
    s = TruncationState()
    seen = False
    for u in us:
        s = accumulate_step(s, u, cfg, eps)
        seen = seen or s.u_accum > eps
        assert s.truncated == seen


def test_pessimistic_reward_examples():
    assert pessimistic_reward(1.0, 0.3, TruncationConfig(lambda_pen=0.0, kappa=0.0), True) == 1.0
    assert pessimistic_reward(1.0, 0.2, TruncationConfig(lambda_pen=1.0)) == pytest.approx(0.8, abs=1e-15)
    assert pessimistic_reward(1.0, 0.2, TruncationConfig(lambda_pen=1.0, kappa=2.0), True) == \
        pytest.approx(-1.2, abs=1e-15)


def test_base_penalised_reward_keeps_only_kappa():
    cfg = TruncationConfig(lambda_pen=1.0, kappa=0.5, base_penalizes_reward=True)
    assert pessimistic_reward(1.0, 0.2, cfg, True) == 0.5


def test_exact_model_means_no_penalty():
    m = make_tabular_mdp(5, 3, 0.9, 1.0, seed=2)
    m_p, m_hat = build_pessimistic_tabular(m, m.P, m.rho0, 1.0, 1.0, 0.1)
    assert np.all(m_hat.u == 0)
    for pi in (uniform_policy(5, 3), random_policy(5, 3, np.random.default_rng(0))):
        assert m_hat.evaluate(pi) == pytest.approx(exact_return(m, pi), abs=1e-10)
        assert m_p.evaluate(pi) == pytest.approx(exact_return(m, pi), abs=1e-10)


def test_zero_epsilon_truncates_immediately():
    m = make_tabular_mdp(4, 2, 0.9, 1.0, seed=3)
    rng = np.random.default_rng(0)
    P_hat = perturb_rows(m.P, 0.3, rng)
    kappa = 0.5
    _, m_hat = build_pessimistic_tabular(m, P_hat, m.rho0, 1.0, kappa, 0.0)
    pi = uniform_policy(4, 2)
    expected = float(m.rho0 @ (pi * (m_hat.r_pen - kappa)).sum(1))
    assert m_hat.evaluate(pi) == pytest.approx(expected, abs=1e-12)


def test_grid_budget_never_rounds_up():
    grid = BudgetGrid.build(0.3, 0.9, 0.2, resolution=100)
    u = np.random.default_rng(0).uniform(0, 0.2, size=(4, 3))
    nxt = grid.next_bins(u)
    vals = grid.values()
    for j in range(grid.n_grid):
        for (s, a), uu in np.ndenumerate(u):
            k = nxt[s, a, j]
            if k < 0 or k == grid.safe:
                continue
            assert vals[k] <= (vals[j] - uu) / 0.9 + 1e-15


def test_exact_matches_monte_carlo():
    m = make_tabular_mdp(5, 2, 0.9, 1.0, seed=21)
    rng = np.random.default_rng(1)
    P_hat = perturb_rows(m.P, rng.uniform(0.05, 0.3, size=(5, 2, 1)), rng)
    eps = float(0.5 * np.abs(P_hat - m.P).sum(-1).max())
    _, m_hat = build_pessimistic_tabular(m, P_hat, m.rho0, 1.0, 0.5, eps, resolution=10_000)
    pi = uniform_policy(5, 2)
    g = m_hat.monte_carlo(pi, 1_000_000, seed=0)
    se = g.std() / math.sqrt(g.size)
    assert abs(g.mean() - m_hat.evaluate(pi)) <= 3 * se
