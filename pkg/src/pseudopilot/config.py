"""Run and experiment configuration, with YAML loading.

Defaults mirror the published hyperparameters where they exist (s=30, m=0.5,
alpha=0.1, beta=1, lambda=0.1, gamma=0.9, momentum 0.9, weight decay 5e-4);
everything else is a desk-scale choice.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .nn import OptimConfig

METHODS = ("S+T", "ENT", "TML", "TML_SPL", "TML_DQNPL", "CML")
SCHEMA_VERSION = 1


class SpecError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class RunConfig:
    method: str = "TML"
    seed: int = 0
    # extractor widths: input -> hidden... -> feature_dim
    hidden: tuple = (32,)
    feature_dim: int = 16
    epochs: int = 10
    batch_size: int = 32
    scale: float = 30.0
    margin: float = 0.5
    alpha: float = 0.1
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_rate: float = 10.0
    decay_power: float = 0.75
    # later phases train at this point of the annealing schedule
    finetune_progress: float = 1.0
    # pseudo-labeling loops
    max_outer: int = 5
    patience: int = 2
    retrain_epochs: int | None = None
    clone_epochs: int = 1
    carry_positive: bool = True
    spl_threshold: float = 0.9
    # selection agent
    n_candidates: int = 16
    beta: float = 1.0
    lam: float = 0.1
    tau: float | None = None
    gamma: float = 0.9
    q_hidden: tuple = (128, 64)
    q_lr: float = 0.001
    q_batch_size: int = 32
    replay_capacity: int = 10_000
    eps_decay_steps: int = 40
    q_updates_per_step: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise SpecError("method", f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        for name in ("epochs", "batch_size", "feature_dim", "max_outer", "n_candidates",
                     "q_batch_size", "replay_capacity", "clone_epochs"):
            if getattr(self, name) < 1:
                raise SpecError(name, "must be a positive integer")
        if self.retrain_epochs is not None and self.retrain_epochs < 0:
            raise SpecError("retrain_epochs", "must be nonnegative")
        if not 0.0 <= self.gamma < 1.0:
            raise SpecError("gamma", "must lie in [0, 1)")
        if self.alpha < 0:
            raise SpecError("alpha", "must be nonnegative")
        if not 0.0 < self.spl_threshold <= 1.0:
            raise SpecError("spl_threshold", "must lie in (0, 1]")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "q_hidden", tuple(int(h) for h in self.q_hidden))

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr, self.momentum, self.weight_decay, self.decay_rate, self.decay_power)

    def q_optim(self) -> OptimConfig:
        return OptimConfig(self.q_lr, self.momentum, self.weight_decay, self.decay_rate, self.decay_power)

    @property
    def n_retrain_epochs(self) -> int:
        if self.retrain_epochs is not None:
            return self.retrain_epochs
        return max(1, self.epochs // self.max_outer)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DataConfig:
    K: int = 4
    input_dim: int = 2
    shift_magnitude: float = 3.0
    rotation_angle: float = 0.8
    n_source_per_class: int = 100
    k_shot: int = 3
    n_unlabeled_per_class: int = 100
    separation: float = 6.0
    sigma: float = 1.0
    # data seed = run seed + data_seed_offset unless ``path`` is set
    data_seed_offset: int = 1000
    path: str | None = None

    def generator_kwargs(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("data_seed_offset")
        d.pop("path")
        return d


@dataclass(frozen=True)
class ExperimentSpec:
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)
    methods: tuple = ("S+T", "TML")
    seeds: tuple = (0,)
    k_shots: tuple = (1, 3, 5)
    out: str = "results"

    def __post_init__(self):
        if not self.methods:
            raise SpecError("methods", "need at least one method")
        for m in self.methods:
            if m not in METHODS:
                raise SpecError("methods", f"unknown method {m!r}")
        if not self.seeds:
            raise SpecError("seeds", "need at least one seed")
        if any(int(k) < 1 for k in self.k_shots):
            raise SpecError("k_shots", "k values must be >= 1")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "k_shots", tuple(int(k) for k in self.k_shots))


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise SpecError(prefix, "must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise SpecError(f"{prefix}.{key}", "unknown field")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise SpecError(prefix, str(exc)) from None


def spec_from_dict(raw: dict) -> ExperimentSpec:
    raw = dict(raw or {})
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SpecError("schema_version", f"unsupported version {version!r}")
    data = _build(DataConfig, raw.pop("data", {}) or {}, "data")
    run = _build(RunConfig, raw.pop("run", {}) or {}, "run")
    return _build(ExperimentSpec, {**raw, "data": data, "run": run}, "experiment")


def load_spec(path) -> ExperimentSpec:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise SpecError("config", f"not valid YAML: {exc}") from None
    return spec_from_dict(raw or {})


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["schema_version"] = SCHEMA_VERSION
    return d
