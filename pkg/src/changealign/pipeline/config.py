"""Model and training configuration (JSON round-trippable)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    stages: int = 3
    base_channels: int = 16
    in_channels: int = 1


@dataclass
class BtdaConfig:
    enabled: bool = True
    delta_max: float = 3.0
    levels: list[int] = field(default_factory=lambda: [-1])


@dataclass
class SscaConfig:
    enabled: bool = True
    r: int = 4


@dataclass
class LossWeights:
    w_off: float = 0.01
    w_sparse: float = 0.0


@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 4
    checkpoint_every: int = 0


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    btda: BtdaConfig = field(default_factory=BtdaConfig)
    ssca: SscaConfig = field(default_factory=SscaConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    threshold: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.encoder.stages < 1:
            raise ConfigError("encoder.stages must be >= 1")
        if self.encoder.base_channels < 1 or self.encoder.in_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.loss_weights.w_off < 0 or self.loss_weights.w_sparse < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.btda.delta_max > 0:
            raise ConfigError("btda.delta_max must be > 0")
        if self.ssca.r < 1:
            raise ConfigError("ssca.r must be >= 1")
        self.btda_levels()
        if self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigError("train.batch_size must be >= 1 and train.lr > 0")

    def btda_levels(self) -> list[int]:
        """Configured BTDA levels as non-negative stage indices, sorted."""
        n = self.encoder.stages
        out = set()
        for lv in self.btda.levels:
            idx = lv + n if lv < 0 else lv
            if not 0 <= idx < n:
                raise ConfigError(f"btda level {lv} outside encoder with {n} stages")
            out.add(idx)
        return sorted(out)

    def stage_channels(self, stage: int) -> int:
        return self.encoder.base_channels * 2**stage

    @property
    def feature_channels(self) -> int:
        return self.stage_channels(self.encoder.stages - 1)

    @property
    def downsample(self) -> int:
        return 2**self.encoder.stages

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        ssca = dict(d.get("ssca", {}))
        weights = dict(d.get("loss_weights", {}))
        # ssca.sparsity_weight is accepted as an alias for loss_weights.w_sparse
        if "sparsity_weight" in ssca:
            weights.setdefault("w_sparse", ssca.pop("sparsity_weight"))
        try:
            return cls(
                encoder=EncoderConfig(**d.get("encoder", {})),
                btda=BtdaConfig(**d.get("btda", {})),
                ssca=SscaConfig(**ssca),
                loss_weights=LossWeights(**weights),
                threshold=float(d.get("threshold", 0.5)),
                train=TrainConfig(**d.get("train", {})),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
