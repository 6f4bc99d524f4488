"""Desk-scale environments, behaviour policies and offline dataset collection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Iterator, NamedTuple

import numpy as np

from . import kernels
from .errors import DataError, DegenerateReferenceError, ParameterError

SIMPLEX_TOL = 1e-12


# ---------------------------------------------------------------------------
# tabular MDPs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP with transition tensor ``P[s, a, s']`` and rewards ``r[s, a]``."""

    P: np.ndarray
    r: np.ndarray
    rho0: np.ndarray
    gamma: float
    r_max: float

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        rho0 = np.asarray(self.rho0, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ParameterError(f"P must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise ParameterError(f"r must have shape {P.shape[:2]}, got {r.shape}")
        if rho0.shape != (P.shape[0],):
            raise ParameterError(f"rho0 must have shape ({P.shape[0]},), got {rho0.shape}")
        check_simplex(P, "P")
        check_simplex(rho0, "rho0")
        if not 0.0 <= self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.r_max > 0:
            raise ParameterError("r_max must be positive")
        if np.any(np.abs(r) > self.r_max):
            raise ParameterError("|r(s, a)| exceeds r_max")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "rho0", rho0)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def with_model(self, P=None, rho0=None) -> "TabularMDP":
        return TabularMDP(
            P=self.P if P is None else P,
            r=self.r,
            rho0=self.rho0 if rho0 is None else rho0,
            gamma=self.gamma,
            r_max=self.r_max,
        )


def check_simplex(p: np.ndarray, name: str = "distribution", tol: float = SIMPLEX_TOL) -> None:
    p = np.asarray(p)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ParameterError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ParameterError(f"{name} rows do not sum to 1 within {tol}")


def _dirichlet_rows(rng: np.random.Generator, shape: tuple, n: int, concentration: float) -> np.ndarray:
    x = rng.dirichlet(np.full(n, concentration), size=shape)
    return x / x.sum(axis=-1, keepdims=True)


def make_tabular_mdp(
    n_states: int,
    n_actions: int,
    gamma: float,
    r_max: float,
    seed: int,
    *,
    nonnegative_rewards: bool = False,
    concentration: float = 1.0,
) -> TabularMDP:
    """Random MDP with Dirichlet transition rows and uniform rewards.

    Rewards are drawn from ``[-r_max, r_max]``, or from ``[0, r_max]`` when
    ``nonnegative_rewards`` is set.
    """
    if n_states < 2 or n_actions < 2:
        raise ParameterError("need n_states >= 2 and n_actions >= 2")
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"gamma must lie in [0, 1), got {gamma}")
    if not r_max > 0:
        raise ParameterError("r_max must be positive")
    rng = np.random.default_rng(seed)
    P = _dirichlet_rows(rng, (n_states, n_actions), n_states, concentration)
    rho0 = _dirichlet_rows(rng, (), n_states, concentration)
    low = 0.0 if nonnegative_rewards else -r_max
    r = rng.uniform(low, r_max, size=(n_states, n_actions))
    return TabularMDP(P=P, r=r, rho0=rho0, gamma=gamma, r_max=r_max)


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> np.ndarray:
    return _dirichlet_rows(rng, (n_states,), n_actions, 1.0)


# ---------------------------------------------------------------------------
# continuous point-mass
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointMassEnv:
    """2-D double integrator. State is ``(x, y, vx, vy)``, action a bounded
    acceleration; reward is minus the distance of the next position to the
    goal. Episodes last exactly ``horizon`` steps.

    Transition noise has standard deviation
    ``noise_scale * (1 + noise_growth * |p - goal|)``, so the dynamics are
    noisier far from the goal.
    """

    dt: float = 0.1
    noise_scale: float = 0.01
    noise_growth: float = 5.0
    action_bound: float = 1.0
    horizon: int = 100
    goal: tuple = (0.0, 0.0)
    start_radius: float = 1.0
    env_id: str = "pointmass-v0"

    state_dim = 4
    action_dim = 2

    def reset(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        s = np.zeros((n, 4))
        s[:, :2] = rng.uniform(-self.start_radius, self.start_radius, size=(n, 2))
        return s

    def clip_action(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, -self.action_bound, self.action_bound)

    def mean_next_state(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        a = self.clip_action(a)
        v = s[..., 2:] + self.dt * a
        p = s[..., :2] + self.dt * v
        return np.concatenate([p, v], axis=-1)

    def reward(self, s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        return -np.linalg.norm(s_next[..., :2] - np.asarray(self.goal), axis=-1)

    def noise_std(self, s: np.ndarray) -> np.ndarray:
        dist = np.linalg.norm(s[..., :2] - np.asarray(self.goal), axis=-1)
        return self.noise_scale * (1.0 + self.noise_growth * dist)

    def step(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator):
        mean = self.mean_next_state(s, a)
        s_next = mean + self.noise_std(s)[..., None] * rng.standard_normal(mean.shape)
        return s_next, self.reward(s, a, s_next)

    def descriptor(self) -> dict:
        return {
            "env_id": self.env_id,
            "kind": "continuous",
            "state_dim": 4,
            "action_dim": 2,
            "action_bound": self.action_bound,
            "params": {
                "dt": self.dt,
                "noise_scale": self.noise_scale,
                "noise_growth": self.noise_growth,
                "horizon": self.horizon,
                "goal": list(self.goal),
                "start_radius": self.start_radius,
            },
        }


class RandomPolicy:
    def __init__(self, action_dim: int, action_bound: float):
        self.action_dim = action_dim
        self.action_bound = action_bound

    def __call__(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.action_bound, self.action_bound, size=(s.shape[0], self.action_dim))


class PDPolicy:
    """Proportional-derivative controller toward the goal plus Gaussian noise."""

    def __init__(self, kp: float, kd: float, noise: float, action_bound: float, goal=(0.0, 0.0)):
        self.kp, self.kd, self.noise = kp, kd, noise
        self.action_bound = action_bound
        self.goal = np.asarray(goal, dtype=np.float64)

    def __call__(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        a = -self.kp * (s[:, :2] - self.goal) - self.kd * s[:, 2:]
        if self.noise > 0:
            a = a + self.noise * rng.standard_normal(a.shape)
        return np.clip(a, -self.action_bound, self.action_bound)


BEHAVIOR_TIERS = ("random", "medium", "expert")


def behavior_policy(env: PointMassEnv, tier: str):
    if tier == "random":
        return RandomPolicy(env.action_dim, env.action_bound)
    if tier == "medium":
        return PDPolicy(kp=1.0, kd=0.6, noise=0.4, action_bound=env.action_bound, goal=env.goal)
    if tier == "expert":
        return PDPolicy(kp=4.0, kd=3.0, noise=0.1, action_bound=env.action_bound, goal=env.goal)
    raise ParameterError(f"unknown behaviour tier {tier!r}; expected one of {BEHAVIOR_TIERS}")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


class Transition(NamedTuple):
    s: Any
    a: Any
    r: float
    s_next: Any
    done: bool


@dataclass(eq=False)
class Dataset:
    """Columnar store of logged transitions.

    Tabular datasets hold integer state/action indices of shape ``(n,)``;
    continuous ones hold float arrays of shape ``(n, dim)``.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    env_descriptor: dict
    behavior_tag: str = ""
    start_state_pool: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.rewards)
        if n == 0:
            raise DataError("dataset is empty")
        for name in ("states", "actions", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        if self.start_state_pool is None:
            self.start_state_pool = np.arange(n)
        self.start_state_pool = np.asarray(self.start_state_pool, dtype=np.int64)
        self._check_dims()

    def _check_dims(self):
        d = self.env_descriptor
        if d.get("kind") == "tabular":
            for name, bound in (("states", d["n_states"]), ("next_states", d["n_states"]), ("actions", d["n_actions"])):
                col = getattr(self, name)
                if col.ndim != 1 or col.min() < 0 or col.max() >= bound:
                    raise DataError(f"{name} out of range for descriptor")
        else:
            ds, da = d["state_dim"], d["action_dim"]
            if self.states.shape[1:] != (ds,) or self.next_states.shape[1:] != (ds,):
                raise DataError("state dimension does not match descriptor")
            if self.actions.shape[1:] != (da,):
                raise DataError("action dimension does not match descriptor")

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]), self.next_states[i], bool(self.dones[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))

    @property
    def transitions(self) -> list:
        return list(self)

    @property
    def episode_start_mask(self) -> np.ndarray:
        """True where a transition opens an episode (first row, or after ``done``)."""
        m = np.zeros(len(self), dtype=bool)
        m[0] = True
        m[1:] = self.dones[:-1]
        return m

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
            self.dones[idx], self.env_descriptor, self.behavior_tag,
        )


def tabular_descriptor(mdp: TabularMDP, **params) -> dict:
    return {
        "env_id": "tabular-v0",
        "kind": "tabular",
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "state_dim": 1,
        "action_dim": 1,
        "gamma": mdp.gamma,
        "r_max": mdp.r_max,
        "params": params,
    }


def collect_dataset(
    env,
    policy,
    n_transitions: int,
    seed: int,
    *,
    episode_len: int | None = None,
    behavior_tag: str = "",
) -> Dataset:
    """Roll ``policy`` in ``env`` with episode resets and log exactly
    ``n_transitions`` transitions.

    For a :class:`TabularMDP` the policy is an ``(S, A)`` stochastic matrix and
    episodes reset every ``episode_len`` steps (default 10). For the
    point-mass env it is a batched callable ``policy(states, rng)``.
    """
    if n_transitions < 1:
        raise ParameterError("n_transitions must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(env, TabularMDP):
        return _collect_tabular(env, np.asarray(policy, float), n_transitions, rng, episode_len or 10, behavior_tag)
    if isinstance(env, PointMassEnv):
        return _collect_pointmass(env, policy, n_transitions, rng, episode_len or env.horizon, behavior_tag)
    raise ParameterError(f"unsupported environment {type(env).__name__}")


def _collect_tabular(mdp, pi, n, rng, episode_len, tag) -> Dataset:
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ParameterError("tabular policy must have shape (S, A)")
    check_simplex(pi, "policy")
    unif = rng.random((n, 3))
    s, a, sn, done = kernels.tabular_rollout(
        np.cumsum(mdp.P, axis=-1), np.cumsum(pi, axis=-1), np.cumsum(mdp.rho0), episode_len, unif
    )
    desc = tabular_descriptor(mdp, episode_len=episode_len)
    return Dataset(s, a, mdp.r[s, a], sn, done, desc, tag)


def _collect_pointmass(env: PointMassEnv, policy, n, rng, episode_len, tag) -> Dataset:
    n_ep = -(-n // episode_len)
    s = env.reset(rng, n_ep)
    S = np.empty((n_ep, episode_len, 4))
    A = np.empty((n_ep, episode_len, 2))
    R = np.empty((n_ep, episode_len))
    N = np.empty((n_ep, episode_len, 4))
    for t in range(episode_len):
        a = env.clip_action(policy(s, rng))
        sn, r = env.step(s, a, rng)
        S[:, t], A[:, t], R[:, t], N[:, t] = s, a, r, sn
        s = sn
    done = np.zeros((n_ep, episode_len), bool)
    done[:, -1] = True
    return Dataset(
        S.reshape(-1, 4)[:n], A.reshape(-1, 2)[:n], R.reshape(-1)[:n], N.reshape(-1, 4)[:n],
        done.reshape(-1)[:n], env.descriptor(), tag,
    )


def empirical_model(dataset: Dataset, n_states: int, n_actions: int):
    """Count-based estimates ``(P_hat, rho0_hat, counts)`` from a tabular dataset.

    Unvisited ``(s, a)`` rows fall back to the uniform distribution; the
    initial distribution is the frequency of episode-start states.
    """
    counts = np.zeros((n_states, n_actions, n_states))
    np.add.at(counts, (dataset.states, dataset.actions, dataset.next_states), 1.0)
    visits = counts.sum(axis=-1, keepdims=True)
    P_hat = np.where(visits > 0, counts / np.maximum(visits, 1.0), 1.0 / n_states)
    starts = dataset.states[dataset.episode_start_mask]
    rho_hat = np.bincount(starts, minlength=n_states).astype(np.float64)
    rho_hat /= rho_hat.sum()
    return P_hat, rho_hat, counts


def normalized_score(J_pi: float, J_random: float, J_expert: float) -> float:
    if J_expert == J_random:
        raise DegenerateReferenceError("expert and random reference returns coincide")
    return (J_pi - J_random) / (J_expert - J_random) * 100.0


def make_env(descriptor: dict):
    """Rebuild an environment from a dataset/env descriptor."""
    kind = descriptor.get("kind")
    if kind == "continuous":
        p = descriptor["params"]
        return PointMassEnv(
            dt=p["dt"], noise_scale=p["noise_scale"], noise_growth=p.get("noise_growth", 0.0),
            action_bound=descriptor["action_bound"],
            horizon=p["horizon"], goal=tuple(p["goal"]), start_radius=p["start_radius"],
            env_id=descriptor["env_id"],
        )
    if kind == "tabular":
        p = descriptor["params"]
        return make_tabular_mdp(
            descriptor["n_states"], descriptor["n_actions"], descriptor["gamma"], descriptor["r_max"],
            p["seed"], nonnegative_rewards=p.get("nonnegative_rewards", False),
        )
    raise ParameterError(f"unknown environment kind {kind!r}")


PolicyFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]
