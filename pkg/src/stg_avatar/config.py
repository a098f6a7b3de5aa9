"""Training configuration and its JSON document form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .appearance import EncodingConfig
from .flowdens import DensifyConfig

MODES = ("full", "no-flow", "no-stg", "sh")


@dataclass
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    mode: str = "full"
    # per-group learning rates
    lr_position: float = 1.6e-4
    lr_motion: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_mlp: float = 1e-3
    lr_feature: float = 1e-2
    lr_sh: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # density control schedule
    densify_interval: int = 200
    densify_from: int = 500
    densify_until: int = 8000
    # objective
    lambda_ssim: float = 0.2
    ratios: tuple[float, float, float] = (0.1, 0.05, 0.01)
    ema_decay: float = 0.99
    # initialization
    init_count: int = 5000
    init_jitter: float = 0.01
    init_scale: float = 0.0          # 0: derived from surface spacing
    init_opacity: float = 0.5
    feature_init_std: float = 0.1
    skin_k: int = 4
    skin_sharpness: float = 50.0
    # bookkeeping
    log_interval: int = 50
    nonfinite_patience: int = 10
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.background = tuple(float(b) for b in self.background)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        if len(self.ratios) != 3 or not all(0.0 < r < 1.0 for r in self.ratios):
            raise ValueError("ratios must be three values in (0, 1)")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0 and self.eps > 0):
            raise ValueError("invalid Adam constants")
        if self.densify_interval < 1 or self.log_interval < 1 or self.nonfinite_patience < 1:
            raise ValueError("intervals must be >= 1")
        if self.init_count < 1 or self.skin_k < 1:
            raise ValueError("init_count and skin_k must be >= 1")
        if not 0.0 < self.init_opacity < 1.0:
            raise ValueError("init_opacity must lie in (0, 1)")
        if len(self.background) != 3:
            raise ValueError("background must have three channels")


@dataclass
class RunConfig:
    train: TrainConfig
    densify: DensifyConfig
    encoding: EncodingConfig

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(TrainConfig(), DensifyConfig(), EncodingConfig())

    def to_dict(self) -> dict:
        return {"train": asdict(self.train), "densify": asdict(self.densify), "encoding": asdict(self.encoding)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        sections = {"train": TrainConfig, "densify": DensifyConfig, "encoding": EncodingConfig}
        unknown = set(d) - set(sections)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, typ in sections.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise ValueError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = set(sub) - allowed
            if bad:
                raise ValueError(f"unknown keys in {name!r}: {sorted(bad)}")
            built[name] = typ(**sub)
        return cls(**built)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
