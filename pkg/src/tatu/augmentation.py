"""Truncated model rollouts, the model buffer and mixed real/synthetic batches.

Each trajectory owns a seed derived from the call seed and its index, and all
its random draws (action noise, elite pick, next-state noise) are taken from
that stream up front. Trajectories are then rolled in fixed-size blocks, so
the result does not depend on how blocks are spread over worker threads.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .cvae import CvaeModel
from .envs import Dataset
from .errors import DataError, ParameterError, UnfittedError
from .truncation import Threshold, TruncationConfig, pessimistic_reward

log = logging.getLogger(__name__)

BLOCK = 256
ACTION_SOURCES = ("cvae", "learned_policy")
U_HIST_BINS = 20

_COLUMNS = ("states", "actions", "rewards", "next_states", "dones", "traj_id", "step", "u", "cum_u", "epsilon")


# ---------------------------------------------------------------------------
# action sources: deterministic maps from (states, standard-normal noise)
# ---------------------------------------------------------------------------


class CvaeSource:
    """Decoder of a trained CVAE; the noise is the latent draw (then clipped)."""

    def __init__(self, model: CvaeModel):
        self.model = model
        self.noise_dim = model.latent_dim

    def actions(self, states, noise):
        return self.model.decode(states, np.clip(noise, -self.model.z_clip, self.model.z_clip))


class ActorSource:
    """Deterministic actor plus optional Gaussian exploration, clipped to the box."""

    def __init__(self, actor: Callable[[np.ndarray], np.ndarray], action_dim: int, action_bound: float,
                 noise_scale: float = 0.0):
        self.actor = actor
        self.noise_dim = action_dim
        self.action_bound = action_bound
        self.noise_scale = noise_scale

    def actions(self, states, noise):
        a = self.actor(states) + self.noise_scale * self.action_bound * noise
        return np.clip(a, -self.action_bound, self.action_bound)


# ---------------------------------------------------------------------------
# model buffer
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ModelBuffer:
    """Synthetic transitions plus provenance; oldest rows are evicted first."""

    capacity: int = 1_000_000
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 1:
            raise ParameterError("capacity must be positive")

    def __len__(self) -> int:
        return 0 if not self.data else len(self.data["rewards"])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[name]

    def add(self, other: "ModelBuffer | dict") -> None:
        rows = other.data if isinstance(other, ModelBuffer) else other
        if not rows or len(rows["rewards"]) == 0:
            return
        if not self.data:
            self.data = {k: np.array(rows[k], copy=True) for k in _COLUMNS}
        else:
            self.data = {k: np.concatenate([self.data[k], rows[k]]) for k in _COLUMNS}
        extra = len(self) - self.capacity
        if extra > 0:
            self.data = {k: v[extra:] for k, v in self.data.items()}

    def admission_ok(self) -> bool:
        """Every stored transition's cumulative uncertainty is within its run's threshold."""
        return len(self) == 0 or bool(np.all(self.data["cum_u"] <= self.data["epsilon"]))

    def steps_consecutive(self) -> bool:
        """Provenance steps of each trajectory are 0, 1, 2, ... (before any eviction)."""
        if len(self) == 0:
            return True
        order = np.lexsort((self.data["step"], self.data["traj_id"]))
        tid, step = self.data["traj_id"][order], self.data["step"][order]
        first = np.r_[True, tid[1:] != tid[:-1]]
        expect = np.arange(tid.size) - np.maximum.accumulate(np.where(first, np.arange(tid.size), 0))
        return bool(np.array_equal(step, expect))

    def rows(self) -> list:
        """Hashable row tuples, for multiset comparisons."""
        if len(self) == 0:
            return []
        cols = [self.data[k] for k in _COLUMNS]
        return [tuple(np.asarray(c[i]).tobytes() for c in cols) for i in range(len(self))]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    batch_size: int = 256
    real_ratio: float = 0.7
    action_source: str = "cvae"
    n_start_states: int = 1000
    buffer_capacity: int = 1_000_000
    n_workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ParameterError("real_ratio (eta) must lie in [0, 1]")
        if self.batch_size < 1 or self.n_start_states < 1 or self.n_workers < 1:
            raise ParameterError("batch_size, n_start_states and n_workers must be positive")
        if self.action_source not in ACTION_SOURCES:
            raise ParameterError(f"action_source must be one of {ACTION_SOURCES}")


class Trajectory(NamedTuple):
    traj_id: int
    start_index: int
    length: int          # admitted steps
    u: np.ndarray        # per-step uncertainty over all h rolled steps
    cum_u: np.ndarray    # running accumulation over all h steps
    truncated: bool


def _trajectory_noise(seed, traj_ids, h, noise_dim, state_dim, n_members):
    ss = np.random.SeedSequence(seed)
    act = np.empty((len(traj_ids), h, noise_dim))
    nxt = np.empty((len(traj_ids), h, state_dim))
    pick = np.empty((len(traj_ids), h), dtype=np.int64)
    for k, tid in enumerate(traj_ids):
        rng = np.random.default_rng(np.random.SeedSequence(ss.entropy, spawn_key=(int(tid),)))
        act[k] = rng.standard_normal((h, noise_dim))
        pick[k] = rng.integers(0, n_members, size=h)
        nxt[k] = rng.standard_normal((h, state_dim))
    return act, pick, nxt


def _roll_block(ensemble, source, reward_fn, s0, act_noise, pick, nxt_noise, quantifier, h):
    n, d = s0.shape
    S = np.empty((n, h, d))
    acts, nexts, rews, us = [], [], [], []
    s = s0
    for j in range(h):
        a = source.actions(s, act_noise[:, j])
        pred = ensemble.predict(s, a)
        u = ensemble.clamp(ensemble.raw_uncertainty(pred, quantifier), quantifier)
        mean = np.take_along_axis(pred.means, pick[None, :, j, None], axis=0)[0]
        var = np.take_along_axis(pred.variances, pick[None, :, j, None], axis=0)[0]
        sn = mean + np.sqrt(var) * nxt_noise[:, j]
        S[:, j] = s
        acts.append(a)
        nexts.append(sn)
        rews.append(reward_fn(s, a, sn))
        us.append(u)
        s = sn
    return S, np.stack(acts, 1), np.stack(nexts, 1), np.stack(rews, 1), np.stack(us, 1)


def generate_truncated_trajectories(ensemble, dataset: Dataset, action_source, threshold: Threshold,
                                    config: AugmentationConfig, seed: int, *, reward_fn=None,
                                    start_indices=None, traj_offset: int = 0, n_workers: int | None = None):
    """Roll ``h`` model steps from dataset start states and keep each trajectory's
    admitted prefix (running accumulated uncertainty ``<= epsilon``).

    Returns ``(trajectories, buffer_delta)``. Rewards come from ``reward_fn``
    (the known environment reward) and are then penalised by ``lambda * u``.
    """
    if ensemble is None or not getattr(ensemble, "elite_indices", ()):
        raise UnfittedError("a trained ensemble is required")
    if threshold is None:
        raise ParameterError("a threshold is required; compute it from the dataset first")
    if reward_fn is None:
        raise ParameterError("reward_fn is required (the reward rule is assumed known)")
    tcfg = config.truncation
    h = int(tcfg.horizon_h)
    rng = np.random.default_rng(seed)
    if start_indices is None:
        pool = dataset.start_state_pool
        start_indices = pool[rng.integers(0, pool.size, size=config.n_start_states)]
    start_indices = np.asarray(start_indices, dtype=np.int64)
    n = start_indices.size
    traj_ids = traj_offset + np.arange(n)
    act_noise, pick, nxt_noise = _trajectory_noise(seed, traj_ids, h, action_source.noise_dim,
                                                   ensemble.state_dim, len(ensemble.elite_indices))
    s0 = dataset.states[start_indices].astype(float)
    blocks = [slice(i, min(i + BLOCK, n)) for i in range(0, n, BLOCK)]

    def run(sl):
        return _roll_block(ensemble, action_source, reward_fn, s0[sl], act_noise[sl], pick[sl], nxt_noise[sl],
                           tcfg.quantifier, h)

    workers = config.n_workers if n_workers is None else n_workers
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_ex:
            parts = list(pool_ex.map(run, blocks))
    else:
        parts = [run(sl) for sl in blocks]
    S, A, N, R, U = (np.concatenate([p[k] for p in parts]) if parts else None for k in range(5))
    if n == 0:
        return [], ModelBuffer(config.buffer_capacity)
    eps = threshold.epsilon
    lengths, cum = kernels.truncation_scan(U, tcfg.step_weights(h), eps)
    truncated = lengths < h
    r_pen = pessimistic_reward(R, U, tcfg)
    if tcfg.apply_kappa_to_last_admitted:
        hit = truncated & (lengths > 0)
        r_pen[hit, lengths[hit] - 1] -= tcfg.kappa
    mask = np.arange(h)[None, :] < lengths[:, None]
    ti, tj = np.nonzero(mask)
    delta = {
        "states": S[ti, tj], "actions": A[ti, tj], "rewards": r_pen[ti, tj], "next_states": N[ti, tj],
        "dones": np.zeros(ti.size, bool), "traj_id": traj_ids[ti], "step": tj.astype(np.int64),
        "u": U[ti, tj], "cum_u": cum[ti, tj], "epsilon": np.full(ti.size, eps),
    }
    buf = ModelBuffer(config.buffer_capacity)
    buf.add(delta)
    trajs = [Trajectory(int(traj_ids[k]), int(start_indices[k]), int(lengths[k]), U[k], cum[k], bool(truncated[k]))
             for k in range(n)]
    return trajs, buf


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    n_real: int


def split_counts(eta: float, B: int) -> tuple:
    n_real = int(np.floor(eta * B))
    return n_real, B - n_real


def mixed_batch(dataset: Dataset, buffer: ModelBuffer | None, eta: float, B: int, seed) -> Batch:
    """``floor(eta * B)`` real rows plus the rest from the buffer, both uniform with replacement.

    ``seed`` may be an int or a Generator. With ``eta == 1`` (or an empty
    buffer) only the real draw is made, so the random stream matches plain
    dataset sampling.
    """
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    if B < 1 or not 0.0 <= eta <= 1.0:
        raise ParameterError("need B >= 1 and eta in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_real, n_syn = split_counts(eta, B)
    if n_syn and (buffer is None or len(buffer) == 0):
        log.info("model buffer empty; serving an all-real batch")
        n_real, n_syn = B, 0
    ri = rng.integers(0, len(dataset), size=n_real)
    parts = [(dataset.states[ri], dataset.actions[ri], dataset.rewards[ri], dataset.next_states[ri],
              dataset.dones[ri].astype(bool))]
    if n_syn:
        bi = rng.integers(0, len(buffer), size=n_syn)
        parts.append((buffer["states"][bi], buffer["actions"][bi], buffer["rewards"][bi],
                      buffer["next_states"][bi], buffer["dones"][bi]))
    cols = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    return Batch(*cols, n_real=n_real)


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationStats:
    n_trajectories: int
    n_admitted: int
    mean_length: float
    full_length_fraction: float
    truncation_rate: float
    rejection_rate: float       # rolled-but-rejected steps / all rolled steps
    u_hist: tuple               # (counts, edges) over admitted u
    epsilon: float

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["u_hist"] = [list(map(int, self.u_hist[0])), list(map(float, self.u_hist[1]))]
        return d


def generation_stats(delta: ModelBuffer, n_trajectories: int, h: int, epsilon: float) -> GenerationStats:
    """Statistics computed from buffer rows alone (plus the trajectory count)."""
    n_adm = len(delta)
    if n_adm:
        lengths = np.bincount(np.searchsorted(np.unique(delta["traj_id"]), delta["traj_id"]))
        n_full = int(np.sum(lengths == h))
        u = delta["u"]
        top = float(u.max()) if u.max() > 0 else 1.0
        counts, edges = np.histogram(u, bins=U_HIST_BINS, range=(0.0, top))
    else:
        n_full = 0
        counts, edges = np.zeros(U_HIST_BINS, int), np.linspace(0.0, 1.0, U_HIST_BINS + 1)
    nt = max(n_trajectories, 1)
    return GenerationStats(
        n_trajectories=n_trajectories, n_admitted=n_adm, mean_length=n_adm / nt,
        full_length_fraction=n_full / nt, truncation_rate=1.0 - n_full / nt,
        rejection_rate=1.0 - n_adm / (nt * h), u_hist=(counts, edges), epsilon=float(epsilon),
    )


def run_augmentation_epochs(ensemble, dataset: Dataset, action_source, threshold: Threshold,
                            config: AugmentationConfig, n_epochs: int, seed: int, *, reward_fn,
                            buffer: ModelBuffer | None = None):
    """Repeat generation ``n_epochs`` times into one buffer. Returns ``(buffer, per-epoch stats)``."""
    buffer = ModelBuffer(config.buffer_capacity) if buffer is None else buffer
    seeds = np.random.SeedSequence(seed).generate_state(max(n_epochs, 1))
    stats = []
    for e in range(n_epochs):
        trajs, delta = generate_truncated_trajectories(
            ensemble, dataset, action_source, threshold, config, int(seeds[e]), reward_fn=reward_fn,
            traj_offset=e * config.n_start_states)
        stats.append(generation_stats(delta, len(trajs), config.truncation.horizon_h, threshold.epsilon))
        buffer.add(delta)
    return buffer, stats


__all__ = [
    "ModelBuffer", "AugmentationConfig", "Trajectory", "CvaeSource", "ActorSource", "generate_truncated_trajectories",
    "mixed_batch", "split_counts", "Batch", "run_augmentation_epochs", "generation_stats", "GenerationStats",
]
