"""Run configuration: one JSON-serializable tree, hashed into every artifact."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .diffusion import PretrainConfig
from .guidance import SamplerConfig
from .residual import TrainingConfig


@dataclass
class ModelConfig:
    context_length: int = 16
    d_text: int = 64
    text_layers: int = 2
    text_heads: int = 4
    image_size: int = 16
    channels: int = 64
    attn_heads: int = 2


@dataclass
class ScheduleConfig:
    T: int = 1000
    kind: str = "cosine"


@dataclass
class DataConfig:
    n_scenes: int = 20000
    seed: int = 0
    subject_images: int = 4


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    residual: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            sub = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
            if dataclasses.is_dataclass(sub):
                known = {g.name for g in dataclasses.fields(sub)}
                extra = set(value) - known
                if extra:
                    raise ValueError(f"unknown keys in {f.name!r}: {sorted(extra)}")
                value = type(sub)(**value)
            kwargs[f.name] = value
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def digest(self) -> str:
        """Stable 16-hex-digit hash of the canonical JSON."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_digest(self) -> str:
        """Hash of the parts that determine the base checkpoint."""
        part = {k: self.to_dict()[k] for k in ("model", "schedule", "data", "pretrain")}
        blob = json.dumps(part, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
