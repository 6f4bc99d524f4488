from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from tatu.augmentation import (ActorSource, AugmentationConfig, ModelBuffer, generate_truncated_trajectories,
                               mixed_batch, run_augmentation_epochs, split_counts)
from tatu.dynamics import GaussianPrediction
from tatu.errors import ParameterError, UnfittedError
from tatu.truncation import Threshold, TruncationConfig, compute_threshold


class ConstantUEnsemble:
    """Deterministic drift model with the same uncertainty ``c`` everywhere."""

    elite_indices = (0, 1)
    state_dim = 3

    def __init__(self, c):
        self.c = c

    def predict(self, states, actions):
        mean = np.asarray(states) + 0.1
        return GaussianPrediction(np.stack([mean, mean]), np.zeros((2,) + mean.shape))

    def raw_uncertainty(self, pred, quantifier):
        return np.full(pred.means.shape[1], self.c)

    def clamp(self, u, quantifier):
        return u


def _zero_actor(states):
    return np.zeros((np.shape(states)[0], 2))


SOURCE = ActorSource(_zero_actor, 2, 1.0)


def _reward(s, a, sn):
    return -np.linalg.norm(sn, axis=-1)


def _cfg(h=5, n=40, **kw):
    return AugmentationConfig(truncation=TruncationConfig(horizon_h=h, **kw), n_start_states=n,
                              action_source="learned_policy")


def _gen(ens, ds, eps, cfg, seed=0, **kw):
    return generate_truncated_trajectories(ens, ds, SOURCE, Threshold(eps, eps, 1.0), cfg, seed,
                                           reward_fn=_reward, **kw)


def test_infinite_threshold_keeps_full_horizon(planted):
    ds, _ = planted
    trajs, buf = _gen(ConstantUEnsemble(0.3), ds, np.inf, _cfg())
    assert all(t.length == 5 for t in trajs) and len(buf) == 5 * 40


def test_zero_threshold_rejects_everything(planted):
    ds, _ = planted
    trajs, buf = _gen(ConstantUEnsemble(0.3), ds, 0.0, _cfg())
    assert len(buf) == 0 and all(t.length == 0 and t.truncated for t in trajs)


def test_constant_uncertainty_hand_stepped(planted):
    ds, _ = planted
    c = 0.2
    trajs, buf = _gen(ConstantUEnsemble(c), ds, 2.5 * c, _cfg())
    assert all(t.length == 2 for t in trajs)
    assert len(buf) == 80 and buf.admission_ok() and buf.steps_consecutive()


def test_discounted_accumulation_admits_more(planted):
    ds, _ = planted
    c = 0.2
    _, und = _gen(ConstantUEnsemble(c), ds, 2.5 * c, _cfg())
    _, disc = _gen(ConstantUEnsemble(c), ds, 2.5 * c, _cfg(accumulation_mode="discounted", gamma=0.5))
    assert len(disc) > len(und)


def test_rewards_are_penalised(planted):
    ds, _ = planted
    c = 0.2
    _, buf = _gen(ConstantUEnsemble(c), ds, np.inf, _cfg(lambda_pen=2.0))
    raw = _reward(buf["states"], buf["actions"], buf["next_states"])
    np.testing.assert_allclose(buf["rewards"], raw - 2.0 * c, rtol=0, atol=1e-15)
    assert not buf["dones"].any()


def test_kappa_on_last_admitted(planted):
    ds, _ = planted
    c = 0.2
    cfg = _cfg(lambda_pen=0.0, kappa=3.0, apply_kappa_to_last_admitted=True)
    _, buf = _gen(ConstantUEnsemble(c), ds, 2.5 * c, cfg)
    raw = _reward(buf["states"], buf["actions"], buf["next_states"])
    expected = raw - 3.0 * (buf["step"] == 1)
    np.testing.assert_allclose(buf["rewards"], expected, atol=1e-15)


def test_requires_trained_ensemble_and_reward(planted):
    ds, _ = planted
    ens = ConstantUEnsemble(0.1)
    ens.elite_indices = ()
    with pytest.raises(UnfittedError):
        _gen(ens, ds, 1.0, _cfg())
    with pytest.raises(ParameterError):
        generate_truncated_trajectories(ConstantUEnsemble(0.1), ds, SOURCE, Threshold(1, 1, 1), _cfg(), 0)


def test_mixed_batch_examples(planted):
    ds, _ = planted
    _, buf = _gen(ConstantUEnsemble(0.1), ds, np.inf, _cfg())
    assert mixed_batch(ds, buf, 1.0, 10, 0).n_real == 10
    b0 = mixed_batch(ds, buf, 0.0, 10, 0)
    assert b0.n_real == 0 and not b0.dones.any()
    b7 = mixed_batch(ds, buf, 0.7, 10, 0)
    assert b7.n_real == 7 and len(b7.rewards) == 10
    assert split_counts(0.7, 10) == (7, 3)


def test_mixed_batch_empty_buffer_falls_back(planted):
    ds, _ = planted
    b = mixed_batch(ds, ModelBuffer(), 0.5, 16, 0)
    assert b.n_real == 16


def test_eta_one_matches_plain_sampling(planted):
    ds, _ = planted
    b = mixed_batch(ds, None, 1.0, 32, 4)
    idx = np.random.default_rng(4).integers(0, len(ds), 32)
    assert np.array_equal(b.states, ds.states[idx])


def test_buffer_fifo_capacity():
    buf = ModelBuffer(capacity=5)
    for k in range(3):
        rows = {c: np.arange(3) + 3 * k for c in ("rewards", "dones", "traj_id", "step", "u", "cum_u", "epsilon")}
        rows.update({c: np.zeros((3, 2)) for c in ("states", "actions", "next_states")})
        buf.add(rows)
    assert len(buf) == 5 and list(buf["rewards"]) == [4, 5, 6, 7, 8]


def test_horizon_one_mean_length(planted, planted_ensemble):
    ds, _ = planted
    cfg = _cfg(h=1, n=200)
    th = compute_threshold(planted_ensemble, ds, cfg.truncation)
    _, stats = run_augmentation_epochs(planted_ensemble, ds, SOURCE, th, cfg, 2, 0, reward_fn=_reward)
    assert all(s.mean_length <= 1 for s in stats)


@pytest.mark.parametrize("seed", range(5))
def test_alpha_monotone(planted, planted_ensemble, seed):
    ds, _ = planted
    sizes = []
    for alpha in (1.0, 5.0):
        cfg = _cfg(n=300, alpha=alpha)
        th = compute_threshold(planted_ensemble, ds, cfg.truncation)
        buf, _ = run_augmentation_epochs(planted_ensemble, ds, SOURCE, th, cfg, 1, seed, reward_fn=_reward)
        assert buf.admission_ok()
        sizes.append(len(buf))
    assert sizes[1] <= sizes[0]


def test_parallel_generation_matches_serial(planted, planted_ensemble):
    ds, _ = planted
    cfg = _cfg(n=700)
    th = compute_threshold(planted_ensemble, ds, cfg.truncation)
    _, serial = generate_truncated_trajectories(planted_ensemble, ds, SOURCE, th, cfg, 3, reward_fn=_reward)
    _, par = generate_truncated_trajectories(planted_ensemble, ds, SOURCE, th, replace(cfg, n_workers=3), 3,
                                             reward_fn=_reward)
    assert Counter(serial.rows()) == Counter(par.rows())


def test_generation_deterministic(planted, planted_ensemble):
    ds, _ = planted
    cfg = _cfg(n=100)
    th = compute_threshold(planted_ensemble, ds, cfg.truncation)
    a, _ = run_augmentation_epochs(planted_ensemble, ds, SOURCE, th, cfg, 2, 9, reward_fn=_reward)
    b, _ = run_augmentation_epochs(planted_ensemble, ds, SOURCE, th, cfg, 2, 9, reward_fn=_reward)
    assert a.rows() == b.rows()


def test_config_validation():
    with pytest.raises(ParameterError):
        AugmentationConfig(real_ratio=1.5)
    with pytest.raises(ParameterError):
        AugmentationConfig(action_source="uniform")
