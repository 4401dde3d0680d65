"""JSON experiment configuration with strict key checking."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _positive(where, **values):
    for k, v in values.items():
        if v is None or v <= 0:
            raise ConfigError(f"{where}.{k} must be positive, got {v}")


@dataclass
class ProblemConfig:
    kind: str = "elliptic"
    l_c: float = 1.0
    M: int = 2
    C: float = 0.8
    coarse_elements: int = 10
    norm: str = "semi"

    def __post_init__(self):
        if self.kind not in ("elliptic", "toy_rotation", "toy_ellipse"):
            raise ConfigError(f"problem.kind must be elliptic, toy_rotation or toy_ellipse, got {self.kind!r}")
        if self.norm not in ("semi", "full"):
            raise ConfigError(f"problem.norm must be 'semi' or 'full', got {self.norm!r}")
        _positive("problem", l_c=self.l_c, M=self.M, C=self.C, coarse_elements=self.coarse_elements)

    @property
    def dimension(self) -> int:
        return self.M if self.kind == "elliptic" else 2


@dataclass
class FlowConfig:
    L: int = 16
    H1: int = 512
    H2: int = 256
    partition: str = "odd_even"
    s_max: float = 2.0
    init_scale_bias: bool = True

    def __post_init__(self):
        _positive("flow", L=self.L, H1=self.H1, H2=self.H2, s_max=self.s_max)
        if self.partition not in ("first_half", "odd_even"):
            raise ConfigError(f"flow.partition must be first_half or odd_even, got {self.partition!r}")


@dataclass
class WeightingConfig:
    theta: float = 0.85
    q: float = 1.0
    eps_max: float | None = None

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ConfigError(f"weighting.theta must lie in (0, 1], got {self.theta}")
        if not 0 < self.q <= 1:
            raise ConfigError(f"weighting.q must lie in (0, 1], got {self.q}")
        if self.eps_max is not None and self.eps_max < 0:
            raise ConfigError("weighting.eps_max must be non-negative")


@dataclass
class TrainSection:
    lr: float = 2e-4
    epochs: int = 100
    n_batches: int = 23
    K: int = 4
    beta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        _positive("train", n_batches=self.n_batches, K=self.K)
        if not self.lr >= 0:
            raise ConfigError("train.lr must be non-negative")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be non-negative")
        if self.beta < 0:
            raise ConfigError("train.beta must be non-negative")


@dataclass
class EstimateConfig:
    N_train_rom: int = 100_000
    N_sigma_w: int = 100_000
    N_mc: int = 100_000
    sigma_w_every: int = 0
    N_sigma_w_monitor: int = 10_000

    def __post_init__(self):
        _positive("estimate", N_train_rom=self.N_train_rom, N_sigma_w=self.N_sigma_w,
                  N_mc=self.N_mc, N_sigma_w_monitor=self.N_sigma_w_monitor)
        if self.sigma_w_every < 0:
            raise ConfigError("estimate.sigma_w_every must be non-negative")


@dataclass
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    train: TrainSection = field(default_factory=TrainSection)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"problem": ProblemConfig, "flow": FlowConfig, "weighting": WeightingConfig,
                    "train": TrainSection, "estimate": EstimateConfig}
        unknown = sorted(set(d) - set(sections) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        return cls(**{k: _build(c, d.get(k), k) for k, c in sections.items()}, seed=seed)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)
