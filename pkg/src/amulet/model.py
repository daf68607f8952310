"""AmuletNet assembly: backbone, per-level RFCs, recursive heads, refinement, fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, backbone_specs, extract_features
from .heads import PredictionSet, bpr_specs, fuse_specs, head_specs, predict_all
from .params import ParamSpec, build_params
from .rfc import RfcConfig, integrate, rfc_specs
from .tensor import DEFAULT_DTYPE, Parameter, Tensor

VARIANTS = {"amulet": 1, "amulet-1/1": 1, "amulet-1/2": 2, "amulet-1/4": 4, "amulet-1/8": 8, "amulet-1/16": 16}


@dataclass
class HeadsConfig:
    """``min_stride`` masks out RFC/head levels whose stride is below it (the 1/n ablations)."""

    min_stride: int = 1
    use_bpr: bool = True

    def validate(self) -> None:
        if self.min_stride < 1 or self.min_stride & (self.min_stride - 1):
            raise ValueError(f"heads.min_stride must be a power of two, got {self.min_stride}")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rfc: RfcConfig = field(default_factory=RfcConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)

    def validate(self) -> None:
        self.backbone.validate()
        self.rfc.validate()
        self.heads.validate()
        if not self.active_levels:
            raise ValueError(
                f"heads.min_stride {self.heads.min_stride} exceeds the deepest stride {self.backbone.strides[-1]}"
            )

    @property
    def active_levels(self) -> list[int]:
        return [l for l, s in enumerate(self.backbone.strides) if s >= self.heads.min_stride]


def model_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Parameter schema; independent of ablation masking so every variant shares it."""
    levels = cfg.backbone.levels
    chans = list(cfg.backbone.channels_per_level)
    specs = backbone_specs(cfg.backbone)
    for t in range(levels):
        specs += rfc_specs(t, chans, cfg.rfc)
    top = levels - 1
    for l in range(levels):
        specs += head_specs(l, top, cfg.rfc.combined_channels)
    for l in range(levels):
        specs += bpr_specs(l, chans[0])
    specs += fuse_specs(levels)
    return specs


def forward(cfg: ModelConfig, params: dict, image: Tensor) -> PredictionSet:
    """Full forward pass with an explicit parameter mapping."""
    feats = extract_features(image, cfg.backbone, params)
    integrated = {l: integrate(feats, l, params) for l in cfg.active_levels}
    preds = predict_all(integrated, feats.maps[0], params, use_bpr=cfg.heads.use_bpr)
    preds.features = feats
    preds.integrated = integrated
    return preds


class AmuletNet:
    def __init__(self, cfg: ModelConfig, dtype=DEFAULT_DTYPE):
        cfg.validate()
        self.cfg = cfg
        self.specs = model_specs(cfg)
        self.params: dict[str, Parameter] = build_params(self.specs, dtype)

    @property
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def astype(self, dtype) -> "AmuletNet":
        other = AmuletNet.__new__(AmuletNet)
        other.cfg = self.cfg
        other.specs = self.specs
        other.params = {k: p.astype(dtype) for k, p in self.params.items()}
        return other

    def forward(self, image: Tensor) -> PredictionSet:
        return forward(self.cfg, self.params, image)

    __call__ = forward

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return int(sum(np.prod(p.shape) for p in self.params.values()))
