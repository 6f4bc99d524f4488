"""Small feed-forward networks in plain numpy.

Parameters are immutable between updates: every update returns fresh arrays.
Backward passes are hand-written per layer and return the input gradient too,
so networks can be chained (decoder after encoder, actor into critic).
Everything is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ParameterError

ACTIVATIONS = ("swish", "relu", "tanh", "identity")
LOG_2PI = math.log(2.0 * math.pi)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _act(name, z):
    if name == "swish":
        return z * _sigmoid(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, out):
    if name == "swish":
        s = _sigmoid(z)
        return s + z * s * (1.0 - s)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - out * out
    return np.ones_like(z)


@dataclass(frozen=True, eq=False)
class MlpParams:
    weights: tuple          # W[k] has shape (d_in, d_out)
    biases: tuple
    activations: tuple      # one tag per layer

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ParameterError("weights, biases and activations must have the same nonzero length")
        for k, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ParameterError(f"unknown activation {act!r}")
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ParameterError(f"layer {k}: weight {W.shape} and bias {b.shape} do not fit")
            if k and self.weights[k - 1].shape[1] != W.shape[0]:
                raise ParameterError(f"layer {k}: input dim {W.shape[0]} != previous output "
                                     f"{self.weights[k - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]), self.activations)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


def init_mlp(sizes: Sequence[int], activations: Sequence[str] | str, rng: np.random.Generator,
             *, out_activation: str = "identity") -> MlpParams:
    """Layers ``sizes[0] -> ... -> sizes[-1]``.

    A single activation tag applies to every hidden layer; the output layer
    uses ``out_activation``. Weights use a scaled-normal (He/Glorot-style)
    initialisation, biases start at zero.
    """
    n_layers = len(sizes) - 1
    if n_layers < 1:
        raise ParameterError("need at least input and output sizes")
    if isinstance(activations, str):
        activations = [activations] * (n_layers - 1) + [out_activation]
    if len(activations) != n_layers:
        raise ParameterError("one activation per layer required")
    Ws, bs = [], []
    for d_in, d_out, act in zip(sizes[:-1], sizes[1:], activations):
        scale = math.sqrt(2.0 / d_in) if act in ("relu", "swish") else math.sqrt(1.0 / d_in)
        Ws.append(rng.normal(0.0, scale, size=(d_in, d_out)))
        bs.append(np.zeros(d_out))
    return MlpParams(tuple(Ws), tuple(bs), tuple(activations))


def forward(params: MlpParams, x: np.ndarray, *, return_cache: bool = False):
    """Apply the network to ``x`` of shape ``(in_dim,)`` or ``(n, in_dim)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ParameterError(f"input dim {x.shape[-1]} != network input dim {params.in_dim}")
    h = x
    cache = [x]
    for W, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ W + b
        h = _act(act, z)
        cache.append((z, h))
    return (h, cache) if return_cache else h


def backward(params: MlpParams, cache, d_out: np.ndarray):
    """Gradients of ``sum(d_out * output)``. Returns ``(grad_arrays, d_input)``.

    ``grad_arrays`` follows the ``params.arrays()`` layout.
    """
    g = np.asarray(d_out, dtype=np.float64)
    grads = [None] * (2 * len(params.weights))
    for k in range(len(params.weights) - 1, -1, -1):
        z, out = cache[k + 1]
        g = g * _act_grad(params.activations[k], z, out)
        h_in = cache[k] if k == 0 else cache[k][1]
        if g.ndim == 1:
            grads[2 * k] = np.outer(h_in, g)
            grads[2 * k + 1] = g.copy()
        else:
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return grads, g


def grad(params: MlpParams, loss_fn: Callable, batch):
    """Gradient of a loss defined on network outputs.

    ``batch`` is ``(x, *extra)``; ``loss_fn(output, *extra)`` returns
    ``(loss, d_loss/d_output)`` for the mean batch loss. Returns
    ``(loss, grad_arrays)``.
    """
    x, *extra = batch
    out, cache = forward(params, x, return_cache=True)
    loss, d_out = loss_fn(out, *extra)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    grads, _ = backward(params, cache, d_out)
    if not all(np.all(np.isfinite(gk)) for gk in grads):
        raise NumericError("non-finite gradient")
    return float(loss), grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple
    v: tuple
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls(tuple(np.zeros_like(a) for a in arrays), tuple(np.zeros_like(a) for a in arrays), 0)


def adam_step(arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps_adam: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_arrays, new_state)``.

    ``arrays`` may also be an :class:`MlpParams`, in which case one is returned.
    """
    wrap = arrays if isinstance(arrays, MlpParams) else None
    arrs = arrays.arrays() if wrap is not None else list(arrays)
    if len(arrs) != len(grads) or len(arrs) != len(state.m):
        raise ParameterError("parameter, gradient and state lengths differ")
    t = state.t + 1
    new, ms, vs = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(arrs, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ParameterError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps_adam))
        ms.append(m)
        vs.append(v)
    out = wrap.with_arrays(new) if wrap is not None else new
    return out, AdamState(tuple(ms), tuple(vs), t)


# ---------------------------------------------------------------------------
# Gaussian helpers
# ---------------------------------------------------------------------------


def _check_finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite input")


def gaussian_nll(mean, logvar, target):
    """``0.5 * sum_d [log 2pi + logvar + (target - mean)^2 exp(-logvar)]`` over the last axis."""
    mean, logvar, target = (np.asarray(a, dtype=np.float64) for a in (mean, logvar, target))
    if not (mean.shape == logvar.shape == target.shape):
        raise ParameterError("mean, logvar and target must share a shape")
    _check_finite(mean, logvar, target)
    diff = target - mean
    return 0.5 * np.sum(LOG_2PI + logvar + diff * diff * np.exp(-logvar), axis=-1)


def gaussian_nll_grad(mean, logvar, target):
    """Partial derivatives of :func:`gaussian_nll` w.r.t. mean and logvar."""
    diff = target - mean
    inv = np.exp(-logvar)
    return -diff * inv, 0.5 * (1.0 - diff * diff * inv)


def diag_gaussian_kl(mu, logvar):
    """``KL(N(mu, diag exp(logvar)) || N(0, I))`` summed over the last axis."""
    mu, logvar = np.asarray(mu, dtype=np.float64), np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ParameterError("mu and logvar must share a shape")
    _check_finite(mu, logvar)
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=-1)


def diag_gaussian_kl_grad(mu, logvar):
    return mu, 0.5 * (np.exp(logvar) - 1.0)


@dataclass(frozen=True)
class GaussianHead:
    """Splits a ``2d`` network output into mean and soft-clamped log-variance."""

    lv_min: float = -10.0
    lv_max: float = 2.0

    def __post_init__(self):
        if not self.lv_min < self.lv_max:
            raise ParameterError("lv_min must be below lv_max")

    def split(self, out: np.ndarray):
        d = out.shape[-1] // 2
        raw = out[..., d:]
        upper = self.lv_max - _softplus(self.lv_max - raw)
        logvar = self.lv_min + _softplus(upper - self.lv_min)
        return out[..., :d], logvar

    def backward(self, out: np.ndarray, d_mean: np.ndarray, d_logvar: np.ndarray) -> np.ndarray:
        d = out.shape[-1] // 2
        raw = out[..., d:]
        upper = self.lv_max - _softplus(self.lv_max - raw)
        dlv_draw = _sigmoid(upper - self.lv_min) * _sigmoid(self.lv_max - raw)
        return np.concatenate([d_mean, d_logvar * dlv_draw], axis=-1)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def finite_difference_check(f: Callable[[list], float], arrays: Sequence[np.ndarray],
                            analytic: Sequence[np.ndarray], n_coords: int = 100,
                            rng: np.random.Generator | None = None, step: float = 1e-5,
                            floor: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` maps a list of arrays (same layout as ``arrays``) to a scalar.
    Coordinates are drawn uniformly over all entries. The relative error is
    ``|g - n| / max(|g|, |n|, floor)``; ``floor`` stops vanishing gradients
    from turning rounding noise into huge ratios.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    sizes = np.array([a.size for a in arrays])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[k]), arrays[k].shape)
        orig = arrays[k][idx]
        arrays[k][idx] = orig + step
        fp = f(arrays)
        arrays[k][idx] = orig - step
        fm = f(arrays)
        arrays[k][idx] = orig
        num = (fp - fm) / (2.0 * step)
        ana = float(np.asarray(analytic[k])[idx])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


__all__ = [
    "MlpParams", "init_mlp", "forward", "backward", "grad", "AdamState", "adam_step", "gaussian_nll",
    "gaussian_nll_grad", "diag_gaussian_kl", "diag_gaussian_kl_grad", "GaussianHead",
    "finite_difference_check", "ACTIVATIONS",
]
