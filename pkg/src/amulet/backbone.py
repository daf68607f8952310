"""VGG-style multi-level feature extractor (one pooling stage per level, none after the last)."""

from __future__ import annotations

from dataclasses import dataclass, field

from .params import ParamSpec
from .tensor import Tensor, conv2d, maxpool2, relu

DESK_CHANNELS = (16, 24, 32, 48, 48)
VGG_CHANNELS = (64, 128, 256, 512, 512)


@dataclass
class BackboneConfig:
    levels: int = 5
    convs_per_level: tuple[int, ...] = (2, 2, 2, 2, 2)
    channels_per_level: tuple[int, ...] = DESK_CHANNELS
    kernel_size: int = 3
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3

    def validate(self) -> None:
        if self.levels < 2:
            raise ValueError(f"backbone.levels must be >= 2, got {self.levels}")
        if len(self.channels_per_level) != self.levels:
            raise ValueError(
                f"backbone.channels_per_level has {len(self.channels_per_level)} entries, expected {self.levels}"
            )
        if len(self.convs_per_level) != self.levels:
            raise ValueError(
                f"backbone.convs_per_level has {len(self.convs_per_level)} entries, expected {self.levels}"
            )
        if any(c < 1 for c in self.convs_per_level) or any(c < 1 for c in self.channels_per_level):
            raise ValueError("backbone conv counts and channel counts must be positive")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"backbone.kernel_size must be odd, got {self.kernel_size}")
        div = 2 ** (self.levels - 1)
        h, w = self.input_size
        if h % div or w % div:
            raise ValueError(f"backbone.input_size {h}x{w} is not divisible by 2^(levels-1) = {div}")

    @property
    def strides(self) -> list[int]:
        return [2**l for l in range(self.levels)]


@dataclass
class FeatureSet:
    maps: list[Tensor]
    strides: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.maps)


def backbone_specs(cfg: BackboneConfig) -> list[ParamSpec]:
    specs = []
    k = cfg.kernel_size
    cin = cfg.in_channels
    for level, (n_conv, cout) in enumerate(zip(cfg.convs_per_level, cfg.channels_per_level)):
        for i in range(n_conv):
            base = f"backbone.l{level}.c{i}"
            specs.append(ParamSpec(f"{base}.w", (cout, cin, k, k), "msra"))
            specs.append(ParamSpec(f"{base}.b", (1, cout, 1, 1), "zero"))
            cin = cout
    return specs


def extract_features(image: Tensor, cfg: BackboneConfig, params) -> FeatureSet:
    n, c, h, w = image.shape
    if c != cfg.in_channels or (h, w) != tuple(cfg.input_size):
        raise ValueError(
            f"image shape {image.shape} does not match backbone config "
            f"(channels {cfg.in_channels}, size {tuple(cfg.input_size)})"
        )
    pad = cfg.kernel_size // 2
    maps = []
    x = image
    for level, n_conv in enumerate(cfg.convs_per_level):
        if level > 0:
            x = maxpool2(x)
        for i in range(n_conv):
            base = f"backbone.l{level}.c{i}"
            x = relu(conv2d(x, params[f"{base}.w"], params[f"{base}.b"], stride=1, pad=pad))
        maps.append(x)
    return FeatureSet(maps, cfg.strides)
