"""Run configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

LAMBDA_SWEEP = (0.0, 0.001, 0.005, 0.01, 0.05, 0.1)


@dataclass
class Config:
    hidden: int = 64
    embed_dim: int = 32
    feat_dim: int = 32
    att_hidden: int | None = None  # defaults to hidden
    lam: float = 0.01
    lr: float = 0.1
    # "sgd" (plain gradient descent) or "adam"
    optimizer: str = "sgd"
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 1
    max_len: int = 20
    beam: int = 3
    seed: int = 0
    # "extended" also scores <end> for the forward LSTM and <start> for the
    # backward one; "content" sums t = 1..T only
    loss_range: str = "extended"
    stop_grad_targets: bool = False
    vocab_threshold: int = 5
    length_norm: bool = False
    grad_clip: float | None = None
    retoucher_lr: float | None = None
    retoucher_epochs: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def attention_hidden(self) -> int:
        return self.att_hidden or self.hidden

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.loss_range not in ("extended", "content"):
            raise ConfigError(f"loss_range must be 'extended' or 'content', got {self.loss_range!r}")
        for name in ("hidden", "embed_dim", "feat_dim", "batch_size", "max_len", "beam"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Config:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> Config:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)
