"""Run configuration: one JSON document with every default spelled out."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .federation import ALGORITHMS, NOISES, VARIANTS, RunSettings
from .graphio import Graph, generate_sbm, load_graph

SBM_KEYS = {"block_sizes", "p_intra", "p_inter", "feature_dim", "separation", "seed", "noise"}


@dataclass
class RunConfig:
    dataset: str | None = None
    sbm: dict | None = None
    n_clients: int = 3
    rounds: int = 100
    epochs: int = 1
    s: int = 20
    lam: float = 3.0
    beta: float = 0.1
    tau: float = 0.9
    gamma_step: float = 0.001
    h: int = 2
    n_inits: int = 20
    pg_epochs: int = 100
    pg_batch: int = 32
    pg_lr: float = 1e-3
    lr: float = 1e-3
    batch_size: int | None = None
    variant: str = "HH"
    noise: str = "none"
    noise_a: float = 0.0
    open_set: bool = False
    seeds: list = field(default_factory=lambda: [0])
    algorithm: str = "FedLoG"
    workers: int = 1
    min_missing_nodes: int = 5
    split: list = field(default_factory=lambda: [0.4, 0.3, 0.3])
    receiver: int = 0
    reliability_modes: list = field(default_factory=lambda: ["head", "tail", "balanced", "imbalance"])
    imbalance_rates: list = field(default_factory=lambda: [-5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5])
    target_classes: list | None = None
    noise_levels: list = field(default_factory=lambda: [0.01, 0.1, 0.5])

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.noise not in NOISES:
            raise ConfigError(f"noise must be one of {NOISES}, got {self.noise!r}")
        if self.sbm is not None:
            unknown = set(self.sbm) - SBM_KEYS
            if unknown:
                raise ConfigError(f"unknown sbm keys: {sorted(unknown)}")
        for name in ("n_clients", "rounds", "epochs", "s", "n_inits", "pg_epochs", "pg_batch", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must be three ratios summing to 1, got {self.split}")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"configuration file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        doc = self.to_dict()
        doc.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(doc)

    def settings(self, **overrides) -> RunSettings:
        doc = dict(algorithm=self.algorithm, rounds=self.rounds, epochs=self.epochs, s=self.s, lam=self.lam,
                   beta=self.beta, tau=self.tau, gamma_step=self.gamma_step, variant=self.variant, lr=self.lr,
                   batch_size=self.batch_size, noise=self.noise, noise_a=self.noise_a)
        doc.update(overrides)
        return RunSettings(**doc)

    def load_graph(self) -> Graph:
        if self.dataset is not None:
            return load_graph(self.dataset)
        if self.sbm is not None:
            return generate_sbm(**self.sbm)
        raise ConfigError("configuration names neither a dataset directory nor an sbm block")
