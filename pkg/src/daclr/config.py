"""Run configuration: every tunable constant with its default, loadable from YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    hash_dim: int = 1 << 15
    embed_dim: int = 64
    init_scale: float = 1.0

    def validate(self) -> None:
        if self.embed_dim < 2 or self.hash_dim < self.embed_dim:
            raise ConfigError("encoder: need embed_dim >= 2 and hash_dim >= embed_dim")
        if self.init_scale <= 0:
            raise ConfigError("encoder.init_scale must be positive")


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 10.0
    temperature: float = 0.05
    K: int = 16
    tau_s: float = 0.1
    delta_min: float = 0.2
    delta_max: float = 0.5
    U_eval: int = 10
    U_hard: int = 20
    mine_m: int = 32
    rng_seed: int = 1
    rerank_weight: float = 1.0
    rerank_temperature: float = 1.0
    rerank_body_grad: bool = False
    # ablation switches
    beta_override: float | None = None
    negative_mode: str = "adaptive"  # or "random"

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "K", "U_eval", "U_hard", "mine_m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.K < 2:
            raise ConfigError("train.K must be >= 2")
        for name in ("learning_rate", "temperature", "tau_s", "rerank_temperature"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.rerank_weight < 0:
            raise ConfigError("train.rerank_weight must be >= 0")
        if not self.delta_min < self.delta_max:
            raise ConfigError("train.delta_min must be < train.delta_max")
        if self.beta_override is not None and not 0.0 <= self.beta_override <= 1.0:
            raise ConfigError("train.beta_override must lie in [0, 1]")
        if self.negative_mode not in ("adaptive", "random"):
            raise ConfigError("train.negative_mode must be 'adaptive' or 'random'")


@dataclass
class BM25Config:
    k1: float = 1.2
    b: float = 0.75

    def validate(self) -> None:
        if self.k1 < 0 or not 0.0 <= self.b <= 1.0:
            raise ConfigError("bm25: need k1 >= 0 and 0 <= b <= 1")


@dataclass
class PreselectConfig:
    pages: int = 150
    per_doc: int = 30

    def validate(self) -> None:
        if self.pages < 1 or self.per_doc < 1:
            raise ConfigError("preselect.pages and preselect.per_doc must be >= 1")


@dataclass
class RetrievalConfig:
    p: int = 100
    q: int = 10
    ks: list[int] = field(default_factory=lambda: [10, 20, 100])

    def validate(self) -> None:
        if not 1 <= self.q < self.p:
            raise ConfigError("retrieval: need 1 <= q < p")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("retrieval.ks must be positive integers")


@dataclass
class MllmConfig:
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4o"
    api_key_source: str = "DACLR_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: float = 1.0
    max_concurrency: int = 4

    def validate(self) -> None:
        if self.timeout <= 0 or not 0 <= self.max_retries <= 10 or self.max_concurrency < 1:
            raise ConfigError("mllm: need timeout > 0, 0 <= max_retries <= 10, max_concurrency >= 1")


@dataclass
class SynthConfig:
    seed: int = 1
    n_claims: int = 200
    n_evidence: int = 1000
    n_clusters: int = 8

    def validate(self) -> None:
        if self.n_clusters < 2:
            raise ConfigError("synth.n_clusters must be >= 2")
        if self.n_evidence < self.n_claims:
            raise ConfigError("synth.n_evidence must be >= synth.n_claims")


@dataclass
class RunConfig:
    seed: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bm25: BM25Config = field(default_factory=BM25Config)
    preselect: PreselectConfig = field(default_factory=PreselectConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    mllm: MllmConfig = field(default_factory=MllmConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if hasattr(sub, "validate"):
                sub.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    return config_from_dict(data or {})


def set_path(cfg: RunConfig, dotted: str, value: Any) -> None:
    """Apply a ``section.key=value`` override in place."""
    obj: Any = cfg
    *head, last = dotted.split(".")
    for part in head:
        obj = getattr(obj, part)
    if not hasattr(obj, last):
        raise ConfigError(f"unknown config key {dotted}")
    setattr(obj, last, value)
