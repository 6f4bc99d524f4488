"""Conditional VAE over dataset actions, used as the rollout action source.

The encoder maps ``(s, a)`` to a diagonal Gaussian over ``z``; the decoder maps
``(s, z)`` through ``tanh`` scaled by the action bound, so every decoded action
is inside the box by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .envs import Dataset
from .errors import DataError, ParameterError

Z_CLIP = 2.5


@dataclass(frozen=True)
class CvaeConfig:
    hidden: tuple = (64, 64)
    latent_dim: int | None = None      # None -> 2 * action_dim
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    z_clip: float = Z_CLIP

    def __post_init__(self):
        if self.latent_dim is not None and self.latent_dim < 1:
            raise ParameterError("latent_dim must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.z_clip <= 0:
            raise ParameterError("invalid CVAE training settings")


@dataclass(frozen=True, eq=False)
class CvaeModel:
    encoder: nn.MlpParams           # (s_norm, a / bound) -> (mu, logvar)
    decoder: nn.MlpParams           # (s_norm, z) -> tanh output
    latent_dim: int
    action_bound: float
    s_mean: np.ndarray
    s_std: np.ndarray
    z_clip: float = Z_CLIP
    history: dict = field(default_factory=dict, compare=False)

    def norm_states(self, s):
        return (np.asarray(s, float) - self.s_mean) / self.s_std

    def encode(self, s, a):
        x = np.concatenate([self.norm_states(s), np.asarray(a, float) / self.action_bound], axis=-1)
        out = nn.forward(self.encoder, x)
        return out[..., :self.latent_dim], out[..., self.latent_dim:]

    def decode(self, s, z):
        x = np.concatenate([self.norm_states(s), z], axis=-1)
        return self.action_bound * nn.forward(self.decoder, x)


def init_cvae(state_dim: int, action_dim: int, action_bound: float, rng: np.random.Generator,
              config: CvaeConfig | None = None, s_mean=None, s_std=None) -> CvaeModel:
    config = CvaeConfig() if config is None else config
    L = config.latent_dim or 2 * action_dim
    enc = nn.init_mlp([state_dim + action_dim, *config.hidden, 2 * L], "relu", rng)
    dec = nn.init_mlp([state_dim + L, *config.hidden, action_dim], "relu", rng, out_activation="tanh")
    s_mean = np.zeros(state_dim) if s_mean is None else s_mean
    s_std = np.ones(state_dim) if s_std is None else s_std
    return CvaeModel(enc, dec, L, float(action_bound), s_mean, s_std, config.z_clip)


def cvae_loss(model: CvaeModel, states, actions, noise, *, with_grad: bool = False):
    """Batch-mean ``||a - D(s, z)||^2 + KL(E(s, a) || N(0, I))`` with
    ``z = mu + exp(logvar / 2) * noise``.

    Returns ``(total, reconstruction, kl)``; with ``with_grad`` a fourth item
    holds ``(encoder_grads, decoder_grads)`` of ``total``.
    """
    states = np.asarray(states, float)
    actions = np.asarray(actions, float)
    if states.ndim != 2 or actions.ndim != 2 or states.shape[0] != actions.shape[0] or states.shape[0] == 0:
        raise ParameterError("states and actions must be nonempty 2-D arrays with matching rows")
    if noise.shape != (states.shape[0], model.latent_dim):
        raise ParameterError(f"noise must have shape {(states.shape[0], model.latent_dim)}")
    n, L, B = states.shape[0], model.latent_dim, model.action_bound
    sn = model.norm_states(states)
    enc_in = np.concatenate([sn, actions / B], axis=1)
    enc_out, enc_cache = nn.forward(model.encoder, enc_in, return_cache=True)
    mu, lv = enc_out[:, :L], enc_out[:, L:]
    sigma = np.exp(0.5 * lv)
    z = mu + sigma * noise
    dec_out, dec_cache = nn.forward(model.decoder, np.concatenate([sn, z], axis=1), return_cache=True)
    diff = B * dec_out - actions
    recon = float(np.mean(np.sum(diff * diff, axis=1)))
    kl = float(np.mean(nn.diag_gaussian_kl(mu, lv)))
    total = recon + kl
    if not with_grad:
        return total, recon, kl
    d_dec = 2.0 * B * diff / n
    dec_grads, d_in = nn.backward(model.decoder, dec_cache, d_dec)
    d_z = d_in[:, sn.shape[1]:]
    k_mu, k_lv = nn.diag_gaussian_kl_grad(mu, lv)
    d_mu = d_z + k_mu / n
    d_lv = d_z * noise * 0.5 * sigma + k_lv / n
    enc_grads, _ = nn.backward(model.encoder, enc_cache, np.concatenate([d_mu, d_lv], axis=1))
    return total, recon, kl, (enc_grads, dec_grads)


def train_cvae(dataset: Dataset, config: CvaeConfig | None = None, seed: int = 0) -> CvaeModel:
    config = CvaeConfig() if config is None else config
    if dataset.env_descriptor.get("kind") != "continuous":
        raise DataError("the CVAE needs a continuous-action dataset")
    rng = np.random.default_rng(seed)
    s = dataset.states.astype(float)
    a = dataset.actions.astype(float)
    s_std = s.std(axis=0)
    model = init_cvae(s.shape[1], a.shape[1], dataset.env_descriptor["action_bound"], rng, config,
                      s.mean(axis=0), np.where(s_std > 1e-12, s_std, 1.0))
    enc_state = nn.AdamState.zeros_like(model.encoder.arrays())
    dec_state = nn.AdamState.zeros_like(model.decoder.arrays())
    enc, dec = model.encoder, model.decoder
    hist = []
    n = len(dataset)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, config.batch_size):
            b = order[i:i + config.batch_size]
            noise = rng.standard_normal((b.size, model.latent_dim))
            cur = CvaeModel(enc, dec, model.latent_dim, model.action_bound, model.s_mean, model.s_std, model.z_clip)
            loss, _, _, (ge, gd) = cvae_loss(cur, s[b], a[b], noise, with_grad=True)
            enc, enc_state = nn.adam_step(enc, ge, enc_state, config.lr)
            dec, dec_state = nn.adam_step(dec, gd, dec_state, config.lr)
            total += loss * b.size
        hist.append(total / n)
    return CvaeModel(enc, dec, model.latent_dim, model.action_bound, model.s_mean, model.s_std,
                     model.z_clip, history={"loss": hist})


def sample_actions(model: CvaeModel, states, rng: np.random.Generator) -> np.ndarray:
    """One action per row of ``states``: ``z ~ N(0, I)`` clipped, then decoded."""
    states = np.atleast_2d(np.asarray(states, float))
    z = np.clip(rng.standard_normal((states.shape[0], model.latent_dim)), -model.z_clip, model.z_clip)
    return model.decode(states, z)


def sample_action(model: CvaeModel, s, seed: int) -> np.ndarray:
    return sample_actions(model, np.asarray(s, float)[None], np.random.default_rng(seed))[0]


class CvaePolicy:
    """Batched action source ``policy(states, rng)`` backed by a CVAE."""

    def __init__(self, model: CvaeModel):
        self.model = model

    def __call__(self, states, rng):
        return sample_actions(self.model, states, rng)


__all__ = ["CvaeConfig", "CvaeModel", "init_cvae", "cvae_loss", "train_cvae", "sample_action", "sample_actions",
           "CvaePolicy"]
