"""Model configuration and Transformer size presets."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import yaml

from .tokenizer import capacity_for

# depth, hidden, mlp, heads
PRESETS = {
    "small": (14, 384, 1152, 6),
    "medium": (8, 768, 2358, 8),
    "large": (12, 768, 3072, 12),
}

PATCH_ENCODERS = ("linear", "simple_conv", "resnet5")
SPATIAL_MODES = ("hse_learned", "hse_sinusoidal", "fixed_length", "none")
HEAD_KINDS = ("scalar", "distribution")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    patch_size: int = 32
    hidden: int = 384
    grid_size: int = 10
    scales: List[int] = field(default_factory=lambda: [224, 384])
    max_patches: int = 512
    include_native: bool = True
    preset: Optional[str] = "small"
    depth: int = 14
    heads: int = 6
    mlp: int = 1152
    patch_encoder: str = "resnet5"
    conv_channels: int = 64
    spatial: str = "hse_learned"
    head: str = "scalar"
    buckets: int = 10

    def __post_init__(self):
        self.scales = [int(s) for s in self.scales]
        if self.preset is not None:
            key = self.preset.lower()
            if key not in PRESETS:
                raise ConfigError(f"unknown preset {self.preset!r}")
            self.preset = key
            self.depth, self.hidden, self.mlp, self.heads = PRESETS[key]
        self.validate()

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError("scales must be strictly increasing")
        if any(s < 1 for s in self.scales):
            raise ConfigError("scales must be positive")
        if not self.include_native and not self.scales:
            raise ConfigError("need the native image or at least one resized scale")
        for name in ("patch_size", "hidden", "grid_size", "max_patches", "buckets",
                     "conv_channels", "mlp"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.patch_encoder not in PATCH_ENCODERS:
            raise ConfigError(f"patch_encoder must be one of {PATCH_ENCODERS}")
        if self.spatial not in SPATIAL_MODES:
            raise ConfigError(f"spatial must be one of {SPATIAL_MODES}")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}")
        if self.spatial == "hse_sinusoidal" and self.hidden % 4:
            raise ConfigError("sinusoidal HSE needs hidden divisible by 4")
        if self.patch_encoder != "linear" and self.conv_channels % 8:
            raise ConfigError("conv_channels must be divisible by 8 (group norm)")

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def capacities(self) -> List[int]:
        return [capacity_for(L, self.patch_size) for L in self.scales]

    @property
    def sequence_length(self) -> int:
        native = self.max_patches if self.include_native else 0
        return 1 + native + sum(self.capacities)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        # explicit sizes override the default preset unless one is named
        if "preset" not in data and {"depth", "heads", "mlp", "hidden"} & set(data):
            data["preset"] = None
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        data = self.to_dict()
        data.update(changes)
        if "preset" not in changes and {"depth", "heads", "mlp", "hidden"} & set(changes):
            data["preset"] = None
        return ModelConfig.from_dict(data)


def load_config(path: Union[str, Path]) -> ModelConfig:
    """Read a YAML/JSON config file mirroring :class:`ModelConfig`."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return ModelConfig.from_dict(data)
