"""Experiment configuration with a provenance note on every default."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .features import NetworkShape
from .gaussians import RefinementConfig
from .interaction import DetectionConfig
from .optimize import LossWeights

CONFIG_VERSION = 1


def _f(default, source: str):
    return field(default=default, metadata={"source": source})


@dataclass
class ExperimentConfig:
    # representation
    C: int = _f(32, "chosen")
    E: int = _f(64, "chosen")
    bands: int = _f(6, "chosen")
    map_size: int = _f(64, "chosen")
    hidden: int = _f(64, "chosen")
    # interaction detection
    n_canonical: int = _f(100, "published")
    n_posed: int = _f(100, "chosen: mirrors the canonical count")
    threshold: int = _f(90, "published")
    detection_level: int = _f(1, "chosen")
    # refinement
    prune_threshold: float = _f(0.1, "published")
    split_threshold: float = _f(0.9, "published")
    max_splits_fraction: float = _f(0.1, "chosen")
    offset_radius: float = _f(0.005, "chosen")
    # losses
    lambda_rgb: float = _f(10.0, "published")
    lambda_vgg: float = _f(0.1, "published")
    lambda_mask: float = _f(1.0, "published")
    lambda_reg: float = _f(0.01, "published")
    # optimisation
    lr_train: float = _f(1e-4, "published")
    lr_fit: float = _f(1e-2, "published")
    fit_steps: int = _f(50, "published")
    epochs: int = _f(8, "published")
    coarse_fraction: float = _f(0.625, "chosen: first 5/8 of epochs at the coarse level")
    coarse_level: int = _f(1, "chosen")
    fine_level: int = _f(2, "chosen")
    # rendering and data
    width: int = _f(64, "chosen")
    height: int = _f(64, "chosen")
    focal: float = _f(80.0, "chosen")
    background: tuple = _f((0.0, 0.0, 0.0), "chosen")
    seed: int = _f(0, "chosen")

    def validate(self) -> None:
        self.network_shape().validate()
        self.detection().validate(max(self.n_canonical, self.n_posed))
        self.refinement()
        self.loss_weights()
        if self.width <= 0 or self.height <= 0 or self.focal <= 0:
            raise ValueError("image size and focal length must be positive")
        if min(self.width, self.height) < 16:
            raise ValueError("the perceptual loss needs images of at least 16x16")
        if not 0 <= self.detection_level <= self.coarse_level <= self.fine_level:
            raise ValueError("need detection_level <= coarse_level <= fine_level")
        if self.lr_train < 0 or self.lr_fit < 0 or self.fit_steps < 0 or self.epochs < 0:
            raise ValueError("learning rates and step counts must be nonnegative")

    def network_shape(self) -> NetworkShape:
        return NetworkShape(C=self.C, E=self.E, bands=self.bands, map_size=self.map_size, hidden=self.hidden)

    def detection(self) -> DetectionConfig:
        return DetectionConfig(self.n_canonical, self.n_posed, self.threshold)

    def refinement(self) -> RefinementConfig:
        return RefinementConfig(self.prune_threshold, self.split_threshold, self.max_splits_fraction,
                                self.offset_radius)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_rgb, self.lambda_vgg, self.lambda_mask, self.lambda_reg)

    def level_for_epoch(self, epoch: int) -> int:
        return self.coarse_level if epoch < round(self.coarse_fraction * self.epochs) else self.fine_level

    @staticmethod
    def provenance() -> dict:
        return {f.name: f.metadata["source"] for f in fields(ExperimentConfig)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return {"config_version": CONFIG_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        v = d.pop("config_version", CONFIG_VERSION)
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {v}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "background" in d:
            d["background"] = tuple(d["background"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
