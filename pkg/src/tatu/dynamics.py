"""Probabilistic ensemble dynamics and the uncertainty quantifiers built on it.

Each member maps normalised ``(s, a)`` to a diagonal Gaussian over the state
delta. The delta is divided by a per-dimension scale (never shifted), so a
network that outputs zero predicts ``s' = s`` exactly. Uncertainties are
always reported in raw state units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .envs import Dataset
from .errors import DataError, ParameterError, QuantifierError, UnfittedError

MOPO_NORMS = ("frobenius", "literal")
MOPO_ENTRIES = ("variance", "std")
MIN_TRANSITIONS = 10


@dataclass(frozen=True)
class EnsembleConfig:
    n_total: int = 7
    n_elites: int = 5
    validation_size: int = 1000
    hidden: tuple = (64, 64, 64)
    activation: str = "swish"
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    lv_min: float = -10.0
    lv_max: float = 2.0
    bootstrap: bool = True
    mopo_norm: str = "frobenius"
    mopo_entries: str = "variance"
    u_max_factor: float = 10.0

    def __post_init__(self):
        if not 1 <= self.n_elites <= self.n_total:
            raise ParameterError("need 1 <= n_elites <= n_total")
        if self.validation_size < 1 or self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ParameterError("validation_size, batch_size and lr must be positive, epochs >= 0")
        if self.activation not in nn.ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.mopo_norm not in MOPO_NORMS or self.mopo_entries not in MOPO_ENTRIES:
            raise ParameterError(f"mopo_norm in {MOPO_NORMS}, mopo_entries in {MOPO_ENTRIES}")
        if not self.u_max_factor >= 1.0:
            raise ParameterError("u_max_factor must be >= 1")


@dataclass(frozen=True, eq=False)
class GaussianPrediction:
    """Elite predictions: ``means``/``variances`` have shape ``(E, ..., d)``."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        if self.means.shape != self.variances.shape:
            raise ParameterError("means and variances must share a shape")
        if np.any(self.variances < 0):
            raise ParameterError("variances must be non-negative")

    @property
    def n_members(self) -> int:
        return self.means.shape[0]


def uncertainty_mopo(pred: GaussianPrediction, norm: str = "frobenius", entries: str = "variance"):
    """Largest covariance norm over members.

    ``norm="frobenius"`` is the usual root of summed squares; ``"literal"`` is
    the root of summed absolute values. ``entries`` picks variances or standard
    deviations as the diagonal entries.
    """
    if norm not in MOPO_NORMS or entries not in MOPO_ENTRIES:
        raise QuantifierError(f"unknown norm/entries {norm!r}/{entries!r}")
    if pred.n_members < 1:
        raise QuantifierError("need at least one member prediction")
    m = pred.variances if entries == "variance" else np.sqrt(pred.variances)
    per_member = np.sqrt(np.sum(m * m, axis=-1)) if norm == "frobenius" else np.sqrt(np.sum(np.abs(m), axis=-1))
    return per_member.max(axis=0)


def uncertainty_morel(pred: GaussianPrediction):
    """Largest Euclidean distance between any two member means."""
    E = pred.n_members
    if E < 2:
        raise QuantifierError("the discrepancy quantifier needs at least two members")
    best = np.zeros(pred.means.shape[1:-1])
    for i in range(E):
        for j in range(i + 1, E):
            best = np.maximum(best, np.linalg.norm(pred.means[i] - pred.means[j], axis=-1))
    return best


def select_elites(val_losses, n_elites: int) -> tuple:
    """Indices of the ``n_elites`` smallest losses, best first; ties go to the lower index."""
    val_losses = np.asarray(val_losses, dtype=np.float64)
    if not 1 <= n_elites <= val_losses.size:
        raise ParameterError("n_elites out of range")
    return tuple(int(i) for i in np.argsort(val_losses, kind="stable")[:n_elites])


@dataclass(eq=False)
class DynamicsEnsemble:
    members: list                  # MlpParams per member
    head: nn.GaussianHead
    in_mean: np.ndarray
    in_std: np.ndarray
    out_scale: np.ndarray
    elite_indices: tuple = ()
    config: EnsembleConfig = field(default_factory=EnsembleConfig)
    u_max: dict = field(default_factory=dict)      # quantifier -> clamp value
    history: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.out_scale.shape[0]

    def _inputs(self, states, actions):
        x = np.concatenate([np.asarray(states, float), np.asarray(actions, float)], axis=-1)
        return (x - self.in_mean) / self.in_std

    def member_forward(self, k: int, states, actions):
        """Mean and variance of member ``k`` in raw units (mean already shifted by ``s``)."""
        out = nn.forward(self.members[k], self._inputs(states, actions))
        mu, lv = self.head.split(out)
        return np.asarray(states, float) + mu * self.out_scale, np.exp(lv) * self.out_scale ** 2

    def predict(self, states, actions, members=None) -> GaussianPrediction:
        if not self.elite_indices:
            raise UnfittedError("ensemble has no elites; train it first")
        members = self.elite_indices if members is None else members
        outs = [self.member_forward(k, states, actions) for k in members]
        return GaussianPrediction(np.stack([o[0] for o in outs]), np.stack([o[1] for o in outs]))

    def sample_next(self, states, actions, rng: np.random.Generator):
        """Per row: pick an elite uniformly, sample from its Gaussian.

        Returns ``(next_states, prediction)`` where the prediction holds every
        elite's output for the same rows.
        """
        pred = self.predict(states, actions)
        states = np.asarray(states, float)
        lead = states.shape[:-1]
        pick = rng.integers(0, pred.n_members, size=lead)
        noise = rng.standard_normal(states.shape)
        mean = np.take_along_axis(pred.means, pick[None, ..., None], axis=0)[0]
        var = np.take_along_axis(pred.variances, pick[None, ..., None], axis=0)[0]
        return mean + np.sqrt(var) * noise, pred

    def raw_uncertainty(self, pred: GaussianPrediction, quantifier: str):
        if quantifier == "mopo":
            return uncertainty_mopo(pred, self.config.mopo_norm, self.config.mopo_entries)
        if quantifier == "morel":
            return uncertainty_morel(pred)
        raise QuantifierError(f"unknown quantifier {quantifier!r}")

    def clamp(self, u, quantifier: str):
        cap = self.u_max.get(quantifier)
        u = np.maximum(u, 0.0)
        return u if cap is None else np.minimum(u, cap)

    def uncertainties(self, states, actions, quantifier: str = "mopo", *, clip: bool = True,
                      chunk: int = 8192) -> np.ndarray:
        """``u(s, a)`` for every row; clamped to ``[0, u_max]`` unless ``clip=False``."""
        states = np.asarray(states, float)
        actions = np.asarray(actions, float)
        out = np.empty(states.shape[0])
        for i in range(0, states.shape[0], chunk):
            pred = self.predict(states[i:i + chunk], actions[i:i + chunk])
            out[i:i + chunk] = self.raw_uncertainty(pred, quantifier)
        return self.clamp(out, quantifier) if clip else out


def predict_next(ensemble: DynamicsEnsemble, s, a, seed: int):
    """Single-pair sample with its own seeded stream: ``(s_next, prediction)``."""
    rng = np.random.default_rng(seed)
    s_next, pred = ensemble.sample_next(np.asarray(s, float)[None], np.asarray(a, float)[None], rng)
    return s_next[0], GaussianPrediction(pred.means[:, 0], pred.variances[:, 0])


def dataset_max_uncertainty(ensemble: DynamicsEnsemble, dataset: Dataset, quantifier: str = "mopo",
                            *, clip: bool = True) -> float:
    """Maximum ``u(s_i, a_i)`` over every pair in ``dataset``."""
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    return float(np.max(ensemble.uncertainties(dataset.states, dataset.actions, quantifier, clip=clip)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def split_indices(n: int, validation_size: int, rng: np.random.Generator):
    """Shuffle and hold out ``min(validation_size, n // 5)`` (at least 1) rows."""
    if n < MIN_TRANSITIONS:
        raise DataError(f"dataset has {n} transitions; need at least {MIN_TRANSITIONS}")
    n_val = min(validation_size, max(1, n // 5))
    perm = rng.permutation(n)
    return perm[n_val:], perm[:n_val]


def _nll_loss(head: nn.GaussianHead):
    def loss(out, target):
        mu, lv = head.split(out)
        val = nn.gaussian_nll(mu, lv, target).mean()
        d_mu, d_lv = nn.gaussian_nll_grad(mu, lv, target)
        n = out.shape[0]
        return val, head.backward(out, d_mu / n, d_lv / n)
    return loss


def member_nll(params, head, x, target) -> float:
    mu, lv = head.split(nn.forward(params, x))
    return float(nn.gaussian_nll(mu, lv, target).mean())


def train_ensemble(dataset: Dataset, config: EnsembleConfig | None = None, seed: int = 0) -> DynamicsEnsemble:
    """Fit every member on its own bootstrap of the training split by Gaussian NLL."""
    config = EnsembleConfig() if config is None else config
    if dataset.env_descriptor.get("kind") != "continuous":
        raise DataError("ensemble training needs a continuous-state dataset")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = split_indices(len(dataset), config.validation_size, rng)
    s = dataset.states.astype(float)
    a = dataset.actions.astype(float)
    x_all = np.concatenate([s, a], axis=1)
    delta = dataset.next_states - s
    in_mean = x_all[train_idx].mean(axis=0)
    in_std = x_all[train_idx].std(axis=0)
    in_std = np.where(in_std > 1e-12, in_std, 1.0)
    out_scale = np.sqrt(np.mean(delta[train_idx] ** 2, axis=0))
    out_scale = np.where(out_scale > 1e-12, out_scale, 1.0)
    x = (x_all - in_mean) / in_std
    y = delta / out_scale
    head = nn.GaussianHead(config.lv_min, config.lv_max)
    sizes = [x.shape[1], *config.hidden, 2 * y.shape[1]]
    loss_fn = _nll_loss(head)
    members, histories, val_losses = [], [], []
    member_seeds = rng.spawn(config.n_total)
    for k in range(config.n_total):
        mrng = member_seeds[k]
        params = nn.init_mlp(sizes, config.activation, mrng)
        boot = train_idx[mrng.integers(0, train_idx.size, train_idx.size)] if config.bootstrap else train_idx
        state = nn.AdamState.zeros_like(params.arrays())
        hist = []
        for _ in range(config.epochs):
            order = boot[mrng.permutation(boot.size)]
            total = 0.0
            for i in range(0, order.size, config.batch_size):
                b = order[i:i + config.batch_size]
                loss, g = nn.grad(params, loss_fn, (x[b], y[b]))
                params, state = nn.adam_step(params, g, state, config.lr)
                total += loss * b.size
            hist.append(total / order.size)
        members.append(params)
        histories.append(hist)
        val_losses.append(member_nll(params, head, x[val_idx], y[val_idx]))
    elites = select_elites(val_losses, config.n_elites)
    ens = DynamicsEnsemble(members, head, in_mean, in_std, out_scale, elites, config,
                           history={"train_nll": histories, "val_nll": val_losses,
                                    "train_idx": train_idx, "val_idx": val_idx})
    for q in ("mopo", "morel"):
        if q == "morel" and config.n_elites < 2:
            continue
        ens.u_max[q] = config.u_max_factor * dataset_max_uncertainty(ens, dataset, q, clip=False)
    return ens


def validation_mse(ensemble: DynamicsEnsemble, dataset: Dataset) -> float:
    """Mean squared error of the elite-mean prediction on the held-out split."""
    idx = ensemble.history["val_idx"]
    pred = ensemble.predict(dataset.states[idx], dataset.actions[idx])
    return float(np.mean((pred.means.mean(axis=0) - dataset.next_states[idx]) ** 2))


__all__ = [
    "EnsembleConfig", "GaussianPrediction", "DynamicsEnsemble", "train_ensemble", "select_elites",
    "predict_next", "uncertainty_mopo", "uncertainty_morel", "dataset_max_uncertainty", "validation_mse",
]
