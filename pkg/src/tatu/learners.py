"""Base learners that consume real and synthetic transitions.

``fitted_q_iteration`` is exact tabular Bellman regression. ``ActorCritic`` with
``td3bc_update`` is a small TD3+BC learner: clipped double-Q critics with
target policy smoothing, and a delayed actor trained on
``-lambda * Q(s, pi(s)) + bc_weight * |pi(s) - a|^2`` with
``lambda = alpha / mean|Q|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .envs import Dataset, PointMassEnv, TabularMDP
from .errors import NumericError, ParameterError

# ---------------------------------------------------------------------------
# tabular fitted Q
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabularQ:
    Q: np.ndarray

    def greedy(self) -> np.ndarray:
        """Greedy action per state; ties go to the lowest index."""
        return np.argmax(self.Q, axis=1)

    def policy(self) -> np.ndarray:
        pi = np.zeros_like(self.Q)
        pi[np.arange(self.Q.shape[0]), self.greedy()] = 1.0
        return pi


def fitted_q_iteration(data, gamma: float, n_iters: int, n_states: int, n_actions: int, *,
                       terminal=None, tol: float = 0.0) -> TabularQ:
    """Repeated Bellman regression on tabular transitions.

    ``data`` is a :class:`Dataset` or a tuple ``(s, a, r, s_next)``. Each
    iteration sets ``Q(s, a)`` to the mean of ``r + gamma * max Q(s', .)`` over
    the transitions from ``(s, a)``; unvisited pairs stay at 0. ``terminal``
    marks transitions that do not bootstrap (dataset ``done`` flags are episode
    resets and are ignored unless passed here). Stops early once the sup-norm
    change drops to ``tol``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ParameterError("gamma must lie in [0, 1)")
    if isinstance(data, Dataset):
        s, a, r, sn = data.states, data.actions, data.rewards, data.next_states
    else:
        s, a, r, sn = data
    s, a, sn = (np.asarray(x, dtype=np.int64) for x in (s, a, sn))
    r = np.asarray(r, dtype=np.float64)
    cont = np.ones_like(r) if terminal is None else 1.0 - np.asarray(terminal, dtype=np.float64)
    flat = s * n_actions + a
    counts = np.bincount(flat, minlength=n_states * n_actions).astype(np.float64)
    visited = counts > 0
    Q = np.zeros(n_states * n_actions)
    for _ in range(n_iters):
        target = r + gamma * cont * Q.reshape(n_states, n_actions).max(axis=1)[sn]
        new = np.zeros_like(Q)
        new[visited] = np.bincount(flat, weights=target, minlength=Q.size)[visited] / counts[visited]
        diff = np.max(np.abs(new - Q))
        Q = new
        if diff <= tol:
            break
    return TabularQ(Q.reshape(n_states, n_actions))


# ---------------------------------------------------------------------------
# TD3+BC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TD3BCConfig:
    hidden: tuple = (64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    alpha: float = 2.5
    bc_weight: float = 1.0
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    critic_in_actor: bool = True     # False drops the Q term (pure behaviour cloning)
    max_abs_q: float = 1e6

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0 or not 0.0 < self.tau <= 1.0 or self.policy_delay < 1:
            raise ParameterError("invalid TD3+BC settings")


@dataclass(frozen=True, eq=False)
class ActorCritic:
    actor: nn.MlpParams
    critic1: nn.MlpParams
    critic2: nn.MlpParams
    actor_t: nn.MlpParams
    critic1_t: nn.MlpParams
    critic2_t: nn.MlpParams
    opt_actor: nn.AdamState
    opt_c1: nn.AdamState
    opt_c2: nn.AdamState
    s_mean: np.ndarray
    s_std: np.ndarray
    action_bound: float
    config: TD3BCConfig = field(default_factory=TD3BCConfig)
    step: int = 0

    def norm(self, s):
        return (np.asarray(s, float) - self.s_mean) / self.s_std

    def act(self, states, target: bool = False) -> np.ndarray:
        net = self.actor_t if target else self.actor
        return self.action_bound * nn.forward(net, self.norm(states))

    def q(self, states, actions, which: int = 1, target: bool = False) -> np.ndarray:
        net = {(1, False): self.critic1, (2, False): self.critic2,
               (1, True): self.critic1_t, (2, True): self.critic2_t}[(which, target)]
        x = np.concatenate([self.norm(states), np.asarray(actions, float) / self.action_bound], axis=-1)
        return nn.forward(net, x)[..., 0]

    def __call__(self, states, rng=None) -> np.ndarray:
        return self.act(np.atleast_2d(states))


def init_actor_critic(state_dim: int, action_dim: int, action_bound: float, rng: np.random.Generator,
                      config: TD3BCConfig | None = None, s_mean=None, s_std=None) -> ActorCritic:
    config = TD3BCConfig() if config is None else config
    actor = nn.init_mlp([state_dim, *config.hidden, action_dim], "relu", rng, out_activation="tanh")
    c1 = nn.init_mlp([state_dim + action_dim, *config.hidden, 1], "relu", rng)
    c2 = nn.init_mlp([state_dim + action_dim, *config.hidden, 1], "relu", rng)
    z = nn.AdamState.zeros_like
    return ActorCritic(actor, c1, c2, actor.copy(), c1.copy(), c2.copy(), z(actor.arrays()), z(c1.arrays()),
                       z(c2.arrays()), np.zeros(state_dim) if s_mean is None else np.asarray(s_mean, float),
                       np.ones(state_dim) if s_std is None else np.asarray(s_std, float), float(action_bound), config)


def _soft(target: nn.MlpParams, online: nn.MlpParams, tau: float) -> nn.MlpParams:
    return target.with_arrays([(1.0 - tau) * t + tau * o for t, o in zip(target.arrays(), online.arrays())])


def critic_target(model: ActorCritic, batch, noise: np.ndarray) -> np.ndarray:
    """Clipped double-Q target with smoothed target-policy actions."""
    cfg, B = model.config, model.action_bound
    eps = np.clip(cfg.policy_noise * B * noise, -cfg.noise_clip * B, cfg.noise_clip * B)
    a_next = np.clip(model.act(batch.next_states, target=True) + eps, -B, B)
    q_next = np.minimum(model.q(batch.next_states, a_next, 1, True), model.q(batch.next_states, a_next, 2, True))
    return batch.rewards + cfg.gamma * (1.0 - batch.dones.astype(float)) * q_next


def critic_loss_and_grads(model: ActorCritic, states, actions, y):
    """``mean (Q1 - y)^2 + mean (Q2 - y)^2`` and its gradients for both critics."""
    x = np.concatenate([model.norm(states), np.asarray(actions, float) / model.action_bound], axis=-1)
    n = x.shape[0]
    total, grads = 0.0, []
    for net in (model.critic1, model.critic2):
        out, cache = nn.forward(net, x, return_cache=True)
        diff = out[:, 0] - y
        total += float(np.mean(diff * diff))
        g, _ = nn.backward(net, cache, (2.0 * diff / n)[:, None])
        grads.append(g)
    return total, grads


def actor_loss_and_grads(model: ActorCritic, states, actions):
    """``-lambda * mean Q1(s, pi(s)) + bc_weight * mean |pi(s) - a|^2``; lambda is held constant."""
    cfg, B = model.config, model.action_bound
    sn = model.norm(states)
    n = sn.shape[0]
    out, a_cache = nn.forward(model.actor, sn, return_cache=True)
    pi = B * out
    diff = pi - np.asarray(actions, float)
    bc = float(np.mean(np.sum(diff * diff, axis=1)))
    d_pi = cfg.bc_weight * 2.0 * diff / n
    loss = cfg.bc_weight * bc
    q_term = 0.0
    if cfg.critic_in_actor:
        x = np.concatenate([sn, pi / B], axis=-1)
        q, c_cache = nn.forward(model.critic1, x, return_cache=True)
        lam = cfg.alpha / max(float(np.mean(np.abs(q))), 1e-8)
        q_term = -lam * float(np.mean(q))
        _, d_x = nn.backward(model.critic1, c_cache, np.full((n, 1), -lam / n))
        d_pi = d_pi + d_x[:, sn.shape[1]:] / B
        loss += q_term
    g, _ = nn.backward(model.actor, a_cache, d_pi * B)
    return loss, bc, g


def td3bc_update(model: ActorCritic, batch, rng: np.random.Generator):
    """One TD3+BC step. Returns ``(new_model, losses)``.

    Critics update every call; the actor and all targets every
    ``policy_delay`` calls.
    """
    if len(batch.rewards) == 0:
        raise ParameterError("empty batch")
    cfg = model.config
    noise = rng.standard_normal(np.shape(batch.actions))
    y = critic_target(model, batch, noise)
    c_loss, (g1, g2) = critic_loss_and_grads(model, batch.states, batch.actions, y)
    if not math.isfinite(c_loss) or np.max(np.abs(y)) > cfg.max_abs_q:
        raise NumericError(f"critic diverged at step {model.step}: loss={c_loss:.3e}, max|y|={np.max(np.abs(y)):.3e}")
    c1, o1 = nn.adam_step(model.critic1, g1, model.opt_c1, cfg.critic_lr)
    c2, o2 = nn.adam_step(model.critic2, g2, model.opt_c2, cfg.critic_lr)
    model = replace(model, critic1=c1, critic2=c2, opt_c1=o1, opt_c2=o2, step=model.step + 1)
    losses = {"critic": c_loss}
    if model.step % cfg.policy_delay == 0:
        a_loss, bc, ga = actor_loss_and_grads(model, batch.states, batch.actions)
        actor, oa = nn.adam_step(model.actor, ga, model.opt_actor, cfg.actor_lr)
        model = replace(model, actor=actor, opt_actor=oa,
                        actor_t=_soft(model.actor_t, actor, cfg.tau),
                        critic1_t=_soft(model.critic1_t, model.critic1, cfg.tau),
                        critic2_t=_soft(model.critic2_t, model.critic2, cfg.tau))
        losses.update(actor=a_loss, bc=bc)
    return model, losses


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    mean_discounted: float
    std_discounted: float
    mean_undiscounted: float
    std_undiscounted: float
    n_episodes: int

    @property
    def stderr_discounted(self) -> float:
        return self.std_discounted / math.sqrt(self.n_episodes)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _result(disc, undisc) -> EvalResult:
    return EvalResult(float(np.mean(disc)), float(np.std(disc)), float(np.mean(undisc)), float(np.std(undisc)),
                      len(disc))


def evaluate_policy(env, policy, n_episodes: int, seed: int, *, gamma: float | None = None,
                    horizon: int | None = None) -> EvalResult:
    """Monte-Carlo discounted and undiscounted returns.

    Tabular: ``policy`` is an ``(S, A)`` matrix, ``gamma`` defaults to the
    MDP's and episodes run until ``gamma**t`` drops below 1e-12 (or
    ``horizon``). Point-mass: ``policy(states, rng)`` is batched, episodes
    last ``env.horizon`` steps and ``gamma`` defaults to 0.99.
    """
    if n_episodes < 1:
        raise ParameterError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(env, TabularMDP):
        gamma = env.gamma if gamma is None else gamma
        if horizon is None:
            horizon = 1 if gamma == 0 else int(math.ceil(math.log(1e-12) / math.log(gamma)))
        pi = np.asarray(policy, float)
        cdf_pi, cdf_P = np.cumsum(pi, axis=-1), np.cumsum(env.P, axis=-1)
        s = np.minimum((rng.random(n_episodes)[:, None] >= np.cumsum(env.rho0)).sum(1), env.n_states - 1)
        disc = np.zeros(n_episodes)
        undisc = np.zeros(n_episodes)
        g = 1.0
        for _ in range(horizon):
            a = np.minimum((rng.random(n_episodes)[:, None] >= cdf_pi[s]).sum(1), env.n_actions - 1)
            r = env.r[s, a]
            disc += g * r
            undisc += r
            s = np.minimum((rng.random(n_episodes)[:, None] >= cdf_P[s, a]).sum(1), env.n_states - 1)
            g *= gamma
        return _result(disc, undisc)
    if isinstance(env, PointMassEnv):
        gamma = 0.99 if gamma is None else gamma
        horizon = env.horizon if horizon is None else horizon
        s = env.reset(rng, n_episodes)
        disc = np.zeros(n_episodes)
        undisc = np.zeros(n_episodes)
        g = 1.0
        for _ in range(horizon):
            a = env.clip_action(policy(s, rng))
            s, r = env.step(s, a, rng)
            disc += g * r
            undisc += r
            g *= gamma
        return _result(disc, undisc)
    raise ParameterError(f"unsupported environment {type(env).__name__}")


__all__ = [
    "TabularQ", "fitted_q_iteration", "TD3BCConfig", "ActorCritic", "init_actor_critic", "td3bc_update",
    "critic_loss_and_grads", "actor_loss_and_grads", "critic_target", "evaluate_policy", "EvalResult",
]
