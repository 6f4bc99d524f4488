"""Run configuration: one sectioned structure holding every tunable.

Sections reuse the modules' own config dataclasses where they exist. Unknown
keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field, fields

from .cvae import CvaeConfig
from .dynamics import EnsembleConfig
from .envs import BEHAVIOR_TIERS
from .errors import ParameterError
from .learners import TD3BCConfig
from .truncation import TruncationConfig

# real-data ratio per behaviour tier (declared choice, see the ledger)
ETA_BY_TIER = {"random": 0.5, "medium": 0.7, "expert": 0.9}


@dataclass(frozen=True)
class EnvSection:
    kind: str = "pointmass"            # pointmass | tabular
    tier: str = "random"               # behaviour policy quality (point-mass)
    n_transitions: int = 10_000
    dt: float = 0.1
    noise_scale: float = 0.01
    noise_growth: float = 5.0
    action_bound: float = 1.0
    horizon: int = 100
    n_states: int = 5                  # tabular only
    n_actions: int = 3
    gamma: float = 0.9
    episode_len: int = 10

    def __post_init__(self):
        if self.kind not in ("pointmass", "tabular"):
            raise ParameterError("env.kind must be 'pointmass' or 'tabular'")
        if self.tier not in BEHAVIOR_TIERS:
            raise ParameterError(f"env.tier must be one of {BEHAVIOR_TIERS}")
        if self.n_transitions < 1:
            raise ParameterError("env.n_transitions must be >= 1")


@dataclass(frozen=True)
class AugmentSection:
    n_epochs: int = 5
    n_start_states: int = 2000
    action_source: str = "cvae"
    buffer_capacity: int = 1_000_000
    n_workers: int = 1


@dataclass(frozen=True)
class LearnerSection:
    td3bc: TD3BCConfig = field(default_factory=TD3BCConfig)
    steps: int = 3000
    batch_size: int = 256
    real_ratio: float | None = None    # None -> ETA_BY_TIER[env.tier]
    eval_episodes: int = 500
    log_every: int = 500
    fq_iters: int = 1000               # tabular fitted-Q


@dataclass(frozen=True)
class SweepSection:
    param: str = "alpha"
    grid: tuple = (1.0, 2.0, 3.0, 4.0, 5.0)
    seeds: int = 1


SWEEP_GRIDS = {
    "horizon_h": (1, 3, 5, 7, 10),
    "alpha": (1.0, 2.0, 3.0, 4.0, 5.0),
    "real_ratio": (0.05, 0.25, 0.5, 0.7, 0.9),
}
SWEEP_ALIASES = {"h": "horizon_h", "eta": "real_ratio"}


@dataclass(frozen=True)
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    dynamics: EnsembleConfig = field(default_factory=EnsembleConfig)
    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    learner: LearnerSection = field(default_factory=LearnerSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seed: int = 0
    output_dir: str = "runs"

    @property
    def real_ratio(self) -> float:
        r = self.learner.real_ratio
        return ETA_BY_TIER[self.env.tier] if r is None else r

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {}, "")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Merge a (possibly nested or dotted-key) dict over this config."""
        base = self.to_dict()
        for key, value in _flatten(overrides).items():
            _set_path(base, key.split("."), value, key)
        return RunConfig.from_dict(base)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set_path(d: dict, parts: list, value, full: str) -> None:
    for p in parts[:-1]:
        if p not in d or not isinstance(d[p], dict):
            raise ParameterError(f"unknown config key {full!r}")
        d = d[p]
    if parts[-1] not in d:
        raise ParameterError(f"unknown config key {full!r}")
    d[parts[-1]] = value


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ParameterError(f"config section {where or '<root>'} must be a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ParameterError(f"unknown config key(s) {sorted(where + k for k in unknown)}")
    kw = {}
    for name, value in d.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kw[name] = _build(tp, value, f"{where}{name}.")
        elif isinstance(value, list):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except TypeError as e:
        raise ParameterError(f"bad config section {where or '<root>'}: {e}") from None


def parse_value(text: str):
    """Best-effort literal for ``--set key=value``: int, float, bool, null, list, else string."""
    import json

    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if "," in text:
            return [parse_value(t) for t in text.split(",")]
        return text


def defaults() -> dict:
    return RunConfig().to_dict()


__all__ = ["RunConfig", "EnvSection", "AugmentSection", "LearnerSection", "SweepSection", "ETA_BY_TIER",
           "SWEEP_GRIDS", "SWEEP_ALIASES", "parse_value", "defaults"]
