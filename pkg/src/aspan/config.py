"""Configuration dataclasses with JSON round-tripping.

A config file is a JSON object with optional "model", "train" and "gen"
sections; unspecified fields keep the desk-scale defaults (64 x 64
images, D = 64, 2 blocks, 8 x 8 coarse grid).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

ATTENTION_MODES = ("adaptive_span", "fixed_span", "single_level")
FFN_KERNELS = ("conv3", "linear")
WARP_TIERS = ("easy", "medium", "hard")


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


@dataclass
class GlaConfig:
    num_blocks: int = 2
    coarse_extent: tuple[int, int] = (8, 8)
    sigma_multiplier: float = 5.0
    cell_size_fine: int = 4
    cell_size_medium: int = 2
    samples_per_side: int = 8
    attention_mode: str = "adaptive_span"
    fixed_span_px: float = 13.0
    ffn_kernel: str = "conv3"

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if min(self.coarse_extent) < 1:
            raise ConfigError("coarse_extent entries must be >= 1")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.ffn_kernel not in FFN_KERNELS:
            raise ConfigError(f"ffn_kernel must be one of {FFN_KERNELS}")
        if self.samples_per_side < 2:
            raise ConfigError("samples_per_side must be >= 2")
        if self.cell_size_fine < 1 or self.cell_size_medium < 1:
            raise ConfigError("cell sizes must be >= 1")
        if self.fixed_span_px <= 0:
            raise ConfigError("fixed_span_px must be positive")


@dataclass
class ModelConfig:
    dim: int = 64
    refine_dim: int = 32
    in_channels: int = 1
    match_threshold: float = 0.2
    refine_window: int = 5
    npe: bool = True
    gla: GlaConfig = field(default_factory=GlaConfig)

    def validate(self) -> None:
        if self.dim % 4 != 0:
            raise ConfigError("dim must be divisible by 4 for the positional encoding")
        if not 0.0 < self.match_threshold < 1.0:
            raise ConfigError("match_threshold must be in (0, 1)")
        if self.refine_window % 2 == 0 or self.refine_window < 1:
            raise ConfigError("refine_window must be a positive odd integer")
        self.gla.validate()


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    warmup_epochs: int = 1
    halving_period: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    flow_loss_weight: float = 0.25
    holdout_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.halving_period < 1:
            raise ConfigError("halving_period must be >= 1")
        if self.flow_loss_weight < 0:
            raise ConfigError("flow_loss_weight must be >= 0")


@dataclass
class GenConfig:
    n_pairs: int = 16
    extent: tuple[int, int] = (64, 64)
    tier: str = "medium"
    max_occluders: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be >= 1")
        if self.extent[0] % 8 != 0 or self.extent[1] % 8 != 0:
            raise ConfigError("extent must be divisible by 8")
        if self.tier not in WARP_TIERS:
            raise ConfigError(f"tier must be one of {WARP_TIERS}")
        if self.max_occluders < 0:
            raise ConfigError("max_occluders must be >= 0")


def _build(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = dict(data)
    if cls is ModelConfig and "gla" in kwargs:
        kwargs["gla"] = _build(GlaConfig, kwargs["gla"])
    for key in ("coarse_extent", "extent"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def model_config_from_dict(data: dict) -> ModelConfig:
    cfg = _build(ModelConfig, data)
    cfg.validate()
    return cfg


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.gen.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"model", "train", "gen"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(model=_build(ModelConfig, data.get("model", {})),
                  train=_build(TrainConfig, data.get("train", {})),
                  gen=_build(GenConfig, data.get("gen", {})))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            cfg = cls()
            cfg.validate()
            return cfg
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
