"""Run configuration shared by training, evaluation and the CLI."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .data import ConfigError, Corpus, SimulatorConfig
from .encoders import BACKBONES, EncoderConfig


def derive_seed(root: int, purpose: str) -> int:
    """Stable sub-seed for ``purpose`` under root seed ``root``."""
    digest = hashlib.sha256(f"{int(root)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class LossWeights:
    c: float = 1.0
    u: float = 1.0
    n: float = 1.0
    a: float = 0.004

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ConfigError(f"loss weight lambda_{k} must be >= 0, got {v}")


@dataclass
class RunConfig:
    """Every tunable of a training/evaluation run. Defaults follow the
    published NRMS-based setup; :data:`DESK_PRESET` shrinks it for the
    synthetic corpus."""

    seed: int = 0
    backbone: str = "mhsa"
    # encoders
    title_len: int = 30
    history_len: int = 50
    word_dim: int = 300
    heads: int = 20
    head_dim: int = 20
    provider_dim: int = 400
    provider_hidden: int = 400
    attn_hidden: int = 200
    disc_hidden: int = 256
    min_word_freq: int = 2
    word_vectors: str | None = None
    # objective
    lambda_c: float = 1.0
    lambda_u: float = 1.0
    lambda_n: float = 1.0
    lambda_a: float = 0.004
    biased_reps: bool = True
    # optimisation
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 3
    n_negatives: int = 4
    disc_steps: int = 1
    clip_norm: float = 5.0
    select_on_valid: bool = True

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        for name in ("batch_size", "n_negatives", "disc_steps", "title_len", "history_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        self.weights  # validates lambdas

    @property
    def rep_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_u, self.lambda_n, self.lambda_a)

    def encoder_config(self, corpus: Corpus) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=corpus.vocab_size,
            n_providers=corpus.n_providers,
            title_len=self.title_len,
            history_len=self.history_len,
            word_dim=self.word_dim,
            heads=self.heads,
            head_dim=self.head_dim,
            rep_dim=self.rep_dim,
            provider_dim=self.provider_dim,
            provider_hidden=self.provider_hidden,
            attn_hidden=self.attn_hidden,
            disc_hidden=self.disc_hidden,
            backbone=self.backbone,
        )

    def with_(self, **overrides) -> RunConfig:
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


# Sizes used for the synthetic corpus: titles are short, histories < 40.
DESK_PRESET = dict(
    title_len=12,
    history_len=30,
    word_dim=32,
    heads=4,
    head_dim=8,
    provider_dim=32,
    provider_hidden=32,
    attn_hidden=16,
    disc_hidden=32,
    lr=5e-3,
    batch_size=128,
    epochs=4,
)


def desk_config(**overrides) -> RunConfig:
    return RunConfig(**{**DESK_PRESET, **overrides})


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return data


def load_run_config(path) -> RunConfig:
    return RunConfig.from_dict(load_yaml(path))


def load_simulator_config(path) -> SimulatorConfig:
    data = load_yaml(path)
    known = {f.name for f in fields(SimulatorConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown simulator config keys: {', '.join(unknown)}")
    for k in ("topic_words_per_title", "filler_words_per_title"):
        if k in data:
            data[k] = tuple(data[k])
    return SimulatorConfig(**data)
