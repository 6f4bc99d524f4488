"""In-memory pipeline stages shared by the CLI, the sweep and the end-to-end check."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .augmentation import (ActorSource, AugmentationConfig, CvaeSource, ModelBuffer, mixed_batch,
                           run_augmentation_epochs)
from .config import SWEEP_ALIASES, RunConfig
from .cvae import train_cvae
from .dynamics import train_ensemble
from .envs import PointMassEnv, behavior_policy, collect_dataset, make_tabular_mdp, uniform_policy
from .errors import ParameterError
from .learners import ActorCritic, evaluate_policy, init_actor_critic, td3bc_update
from .truncation import compute_threshold


def derive_seed(seed: int, *tags: int) -> int:
    """Independent child seed for a stage; ``tags`` name the stage."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


STAGE = {"dataset": 1, "dynamics": 2, "cvae": 3, "augment": 4, "policy": 5, "eval": 6}


def make_environment(cfg: RunConfig):
    e = cfg.env
    if e.kind == "pointmass":
        return PointMassEnv(dt=e.dt, noise_scale=e.noise_scale, noise_growth=e.noise_growth,
                            action_bound=e.action_bound, horizon=e.horizon)
    return make_tabular_mdp(e.n_states, e.n_actions, e.gamma, 1.0, derive_seed(cfg.seed, 0))


def generate_dataset(cfg: RunConfig, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    env = make_environment(cfg)
    s = derive_seed(seed, STAGE["dataset"])
    if cfg.env.kind == "pointmass":
        return collect_dataset(env, behavior_policy(env, cfg.env.tier), cfg.env.n_transitions, s,
                               behavior_tag=cfg.env.tier)
    ds = collect_dataset(env, uniform_policy(env.n_states, env.n_actions), cfg.env.n_transitions, s,
                         episode_len=cfg.env.episode_len, behavior_tag="uniform")
    ds.env_descriptor["params"]["seed"] = derive_seed(cfg.seed, 0)
    return ds


def fit_dynamics(cfg: RunConfig, dataset, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    return train_ensemble(dataset, cfg.dynamics, derive_seed(seed, STAGE["dynamics"]))


def fit_cvae(cfg: RunConfig, dataset, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    return train_cvae(dataset, cfg.cvae, derive_seed(seed, STAGE["cvae"]))


def augmentation_config(cfg: RunConfig) -> AugmentationConfig:
    a = cfg.augment
    return AugmentationConfig(truncation=cfg.truncation, batch_size=cfg.learner.batch_size,
                              real_ratio=cfg.real_ratio, action_source=a.action_source,
                              n_start_states=a.n_start_states, buffer_capacity=a.buffer_capacity,
                              n_workers=a.n_workers)


def action_source_for(cfg: RunConfig, cvae=None, policy: ActorCritic | None = None):
    if cfg.augment.action_source == "cvae":
        if cvae is None:
            raise ParameterError("action_source 'cvae' needs a trained CVAE")
        return CvaeSource(cvae)
    if policy is None:
        raise ParameterError("action_source 'learned_policy' needs a policy")
    return ActorSource(policy.act, policy.actor.out_dim, policy.action_bound, noise_scale=0.1)


def augment(cfg: RunConfig, dataset, ensemble, source, seed: int | None = None):
    """Threshold from the dataset, then ``n_epochs`` rounds of truncated generation."""
    seed = cfg.seed if seed is None else seed
    env = make_environment(cfg)
    threshold = compute_threshold(ensemble, dataset, cfg.truncation)
    buf, stats = run_augmentation_epochs(ensemble, dataset, source, threshold, augmentation_config(cfg),
                                         cfg.augment.n_epochs, derive_seed(seed, STAGE["augment"]),
                                         reward_fn=env.reward)
    return buf, stats, threshold


def train_policy(cfg: RunConfig, dataset, buffer: ModelBuffer | None = None, *, eta: float | None = None,
                 seed: int | None = None, metrics=None, tag: str = "policy"):
    """TD3+BC on mixed batches. ``buffer=None`` or ``eta=1`` is plain offline training."""
    seed = cfg.seed if seed is None else seed
    eta = cfg.real_ratio if eta is None else eta
    if buffer is None:
        eta = 1.0
    rng = np.random.default_rng(derive_seed(seed, STAGE["policy"]))
    s_std = dataset.states.std(axis=0)
    model = init_actor_critic(dataset.states.shape[1], dataset.actions.shape[1],
                              dataset.env_descriptor["action_bound"], rng, cfg.learner.td3bc,
                              dataset.states.mean(axis=0), np.where(s_std > 1e-12, s_std, 1.0))
    L = cfg.learner
    for t in range(L.steps):
        batch = mixed_batch(dataset, buffer, eta, L.batch_size, rng)
        model, losses = td3bc_update(model, batch, rng)
        if metrics is not None and (t + 1) % L.log_every == 0:
            for k, v in losses.items():
                metrics.write(t + 1, f"{tag}/{k}", v)
    return model


def evaluate(cfg: RunConfig, policy, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    return evaluate_policy(make_environment(cfg), policy, cfg.learner.eval_episodes,
                           derive_seed(seed, STAGE["eval"]))


# ---------------------------------------------------------------------------
# sweeps and the end-to-end comparison
# ---------------------------------------------------------------------------


def _apply_param(cfg: RunConfig, param: str, value) -> RunConfig:
    param = SWEEP_ALIASES.get(param, param)
    if param == "horizon_h":
        return replace(cfg, truncation=replace(cfg.truncation, horizon_h=int(value)))
    if param == "alpha":
        return replace(cfg, truncation=replace(cfg.truncation, alpha=float(value)))
    if param == "real_ratio":
        return replace(cfg, learner=replace(cfg.learner, real_ratio=float(value)))
    raise ParameterError(f"cannot sweep {param!r}; choose horizon_h, alpha or real_ratio")


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: float
    seed: int
    buffer_size: int
    mean_length: float
    full_length_fraction: float
    epsilon: float
    return_mean: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_sweep(cfg: RunConfig, param: str, grid, seeds, *, train: bool = True, metrics=None) -> list:
    """One row per (seed, value). Dataset, ensemble and CVAE are shared across a
    seed's grid; only the swept setting changes."""
    rows = []
    for seed in seeds:
        ds = generate_dataset(cfg, seed)
        ens = fit_dynamics(cfg, ds, seed)
        cv = fit_cvae(cfg, ds, seed) if cfg.augment.action_source == "cvae" else None
        for k, value in enumerate(grid):
            c = _apply_param(cfg, param, value)
            buf, stats, th = augment(c, ds, ens, action_source_for(c, cv), seed)
            ret = None
            if train:
                pol = train_policy(c, ds, buf, seed=seed)
                ret = evaluate(c, pol, seed).mean_undiscounted
            n_traj = sum(s.n_trajectories for s in stats)
            row = SweepRow(SWEEP_ALIASES.get(param, param), float(value), int(seed), len(buf),
                           sum(s.n_admitted for s in stats) / max(n_traj, 1),
                           sum(s.full_length_fraction * s.n_trajectories for s in stats) / max(n_traj, 1),
                           th.epsilon, ret)
            rows.append(row)
            if metrics is not None:
                tags = {"param": row.param, "value": row.value, "seed": row.seed}
                metrics.write(k, f"sweep/{row.param}/seed{seed}/buffer_size", row.buffer_size, tags)
                if ret is not None:
                    metrics.write(k, f"sweep/{row.param}/seed{seed}/return", ret, tags)
    return rows


def end_to_end(cfg: RunConfig, seeds, horizons=(1, 3, 5, 7, 10), log=None) -> dict:
    """Baseline TD3+BC versus TATU-augmented TD3+BC for each horizon, per seed.

    Returns ``{"baseline": [...], "tatu": {h: [...]}}`` of undiscounted mean
    evaluation returns.
    """
    out = {"baseline": [], "tatu": {h: [] for h in horizons}}
    for seed in seeds:
        ds = generate_dataset(cfg, seed)
        ens = fit_dynamics(cfg, ds, seed)
        cv = fit_cvae(cfg, ds, seed)
        out["baseline"].append(evaluate(cfg, train_policy(cfg, ds, None, seed=seed), seed).mean_undiscounted)
        for h in horizons:
            c = _apply_param(cfg, "horizon_h", h)
            buf, _, _ = augment(c, ds, ens, CvaeSource(cv), seed)
            out["tatu"][h].append(evaluate(c, train_policy(c, ds, buf, seed=seed), seed).mean_undiscounted)
        if log is not None:
            log(seed, out)
    return out


__all__ = ["derive_seed", "make_environment", "generate_dataset", "fit_dynamics", "fit_cvae", "augment",
           "train_policy", "evaluate", "run_sweep", "end_to_end", "augmentation_config", "SweepRow"]
