"""Resolution-based feature combination.

Every backbone level is resized to one target resolution (strided convolution
to shrink finer levels, transposed convolution to extend coarser ones, a 1x1
convolution for the target level itself), the resized maps are concatenated
in level order and mixed by a 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import FeatureSet
from .params import ParamSpec
from .tensor import Tensor, ShapeError, concat_channels, conv2d, transposed_conv2d


@dataclass
class RfcConfig:
    per_level_channels: int = 16
    combined_channels: int = 16

    def validate(self) -> None:
        if self.per_level_channels < 1 or self.combined_channels < 1:
            raise ValueError("rfc channel counts must be positive")


@dataclass
class IntegratedFeature:
    map: Tensor
    level: int
    concat_channels: int  # width of the pre-combination tensor


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def rfc_specs(target: int, level_channels: list[int], cfg: RfcConfig) -> list[ParamSpec]:
    pc = cfg.per_level_channels
    specs = []
    for src, cin in enumerate(level_channels):
        if src < target:
            f = 2 ** (target - src)
            base = f"rfc.t{target}.shrink.l{src}"
            specs.append(ParamSpec(f"{base}.w", (pc, cin, f, f), "msra"))
        elif src > target:
            f = 2 ** (src - target)
            base = f"rfc.t{target}.extend.l{src}"
            specs.append(ParamSpec(f"{base}.w", (cin, pc, 2 * f, 2 * f), "bilinear", factor=f))
        else:
            base = f"rfc.t{target}.same.l{src}"
            specs.append(ParamSpec(f"{base}.w", (pc, cin, 1, 1), "msra"))
        specs.append(ParamSpec(f"{base}.b", (1, pc, 1, 1), "zero"))
    n_in = pc * len(level_channels)
    specs.append(ParamSpec(f"rfc.t{target}.combine.w", (cfg.combined_channels, n_in, 1, 1), "msra"))
    specs.append(ParamSpec(f"rfc.t{target}.combine.b", (1, cfg.combined_channels, 1, 1), "zero"))
    return specs


def shrink(feature: Tensor, factor: int, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Downsample by ``factor`` with a learnable kernel-``factor``, stride-``factor`` convolution."""
    if factor < 2 or not _is_pow2(factor):
        raise ShapeError(f"shrink: factor must be a power of two >= 2, got {factor}")
    h, w = feature.shape[2:]
    if h % factor or w % factor:
        raise ShapeError(f"shrink: spatial extent ({h}, {w}) not divisible by factor {factor}")
    return conv2d(feature, weight, bias, stride=factor, pad=0)


def extend(feature: Tensor, factor: int, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Upsample by ``factor`` with a kernel-2m, stride-m, pad-m/2 transposed convolution."""
    if factor < 2 or not _is_pow2(factor):
        raise ShapeError(f"extend: factor must be a power of two >= 2, got {factor}")
    return transposed_conv2d(feature, weight, bias, stride=factor, pad=factor // 2)


def integrate(features: FeatureSet, level: int, params) -> IntegratedFeature:
    n_levels = len(features.maps)
    if not 0 <= level < n_levels:
        raise ValueError(f"integrate: target level {level} outside 0..{n_levels - 1}")
    if any(m is None for m in features.maps):
        missing = [i for i, m in enumerate(features.maps) if m is None]
        raise ValueError(f"integrate: missing feature levels {missing}")
    resized = []
    for src, fmap in enumerate(features.maps):
        if src < level:
            base = f"rfc.t{level}.shrink.l{src}"
            r = shrink(fmap, 2 ** (level - src), params[f"{base}.w"], params[f"{base}.b"])
        elif src > level:
            base = f"rfc.t{level}.extend.l{src}"
            r = extend(fmap, 2 ** (src - level), params[f"{base}.w"], params[f"{base}.b"])
        else:
            base = f"rfc.t{level}.same.l{src}"
            r = conv2d(fmap, params[f"{base}.w"], params[f"{base}.b"])
        resized.append(r)
    cat = concat_channels(resized)
    out = conv2d(cat, params[f"rfc.t{level}.combine.w"], params[f"rfc.t{level}.combine.b"])
    return IntegratedFeature(out, level, cat.shape[1])
