"""Recursive per-level saliency prediction, boundary refinement and fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSpec
from .rfc import IntegratedFeature
from .tensor import ShapeError, Tensor, add, concat_channels, conv2d, relu, softmax_pair, transposed_conv2d

SCORE_CHANNELS = 2


@dataclass
class PredictionSet:
    """All supervised outputs of one forward pass.

    ``levels`` lists the active levels in ascending order; ``raw``, ``refined``
    and ``level_probs`` are dicts keyed by level. ``level_probs`` and
    ``fused_probs`` hold softmax pairs (channel 0 background, 1 foreground).
    """

    levels: list[int]
    raw: dict[int, Tensor]
    refined: dict[int, Tensor]
    fused: Tensor
    level_probs: dict[int, Tensor] = field(default_factory=dict)
    fused_probs: Tensor | None = None
    features: object = None
    integrated: dict = field(default_factory=dict)

    @property
    def num_outputs(self) -> int:
        return len(self.levels) + 1

    def excitations(self):
        """(foreground, background) excitation arrays per level, then for the fused output."""
        pairs = [(self.level_probs[l].data[:, 1:2], self.level_probs[l].data[:, 0:1]) for l in self.levels]
        pairs.append((self.fused_probs.data[:, 1:2], self.fused_probs.data[:, 0:1]))
        return pairs


def head_specs(level: int, top: int, in_channels: int) -> list[ParamSpec]:
    s = 2**level
    base = f"heads.l{level}"
    if s == 1:
        specs = [ParamSpec(f"{base}.deconv.w", (SCORE_CHANNELS, in_channels, 1, 1), "msra")]
    else:
        specs = [ParamSpec(f"{base}.deconv.w", (in_channels, SCORE_CHANNELS, 2 * s, 2 * s), "bilinear", factor=s)]
    specs.append(ParamSpec(f"{base}.deconv.b", (1, SCORE_CHANNELS, 1, 1), "zero"))
    if level < top:
        specs.append(ParamSpec(f"{base}.recur.w", (SCORE_CHANNELS, SCORE_CHANNELS, 1, 1), "msra"))
        specs.append(ParamSpec(f"{base}.out.w", (SCORE_CHANNELS, SCORE_CHANNELS, 1, 1), "msra"))
        specs.append(ParamSpec(f"{base}.out.b", (1, SCORE_CHANNELS, 1, 1), "zero"))
    return specs


def bpr_specs(level: int, conv1_channels: int) -> list[ParamSpec]:
    base = f"bpr.l{level}"
    return [
        ParamSpec(f"{base}.boundary.w", (SCORE_CHANNELS, conv1_channels, 1, 1), "msra"),
        ParamSpec(f"{base}.boundary.b", (1, SCORE_CHANNELS, 1, 1), "zero"),
        ParamSpec(f"{base}.refine.w", (SCORE_CHANNELS, SCORE_CHANNELS, 1, 1), "msra"),
        ParamSpec(f"{base}.refine.b", (1, SCORE_CHANNELS, 1, 1), "zero"),
    ]


def fuse_specs(n_levels: int) -> list[ParamSpec]:
    return [
        ParamSpec("fuse.w", (SCORE_CHANNELS, SCORE_CHANNELS * n_levels, 1, 1), "msra"),
        ParamSpec("fuse.b", (1, SCORE_CHANNELS, 1, 1), "zero"),
    ]


def _upsample_scores(feat: IntegratedFeature, params) -> Tensor:
    s = 2**feat.level
    w = params[f"heads.l{feat.level}.deconv.w"]
    b = params[f"heads.l{feat.level}.deconv.b"]
    if s == 1:
        return conv2d(feat.map, w, b)
    return transposed_conv2d(feat.map, w, b, stride=s, pad=s // 2)


def predict_level(feat: IntegratedFeature, p_next: Tensor | None, params, top: int) -> Tensor:
    """One link of the recursive prediction chain.

    At the top level the prediction is the upsampled score map itself; below
    it the upsampled scores are added to a 1x1 projection of the next-coarser
    prediction, rectified and passed through a 1x1 recursive weight.
    """
    if (p_next is None) != (feat.level == top):
        raise ValueError(f"predict_level: next prediction must be absent iff level == {top}")
    up = _upsample_scores(feat, params)
    if p_next is None:
        return up
    if p_next.shape != up.shape:
        raise ShapeError(f"predict_level: upsampled scores {up.shape} vs next prediction {p_next.shape}")
    base = f"heads.l{feat.level}"
    mixed = add(up, conv2d(p_next, params[f"{base}.recur.w"]))
    return conv2d(relu(mixed), params[f"{base}.out.w"], params[f"{base}.out.b"])


def refine_boundary(conv1_features: Tensor, p_raw: Tensor, params, level: int) -> Tensor:
    if conv1_features.shape[2:] != p_raw.shape[2:]:
        raise ShapeError(
            f"refine_boundary: level-0 features {conv1_features.shape[2:]} vs prediction {p_raw.shape[2:]}"
        )
    base = f"bpr.l{level}"
    boundary = conv2d(conv1_features, params[f"{base}.boundary.w"], params[f"{base}.boundary.b"])
    return conv2d(relu(add(boundary, p_raw)), params[f"{base}.refine.w"], params[f"{base}.refine.b"])


def fuse(refined: dict[int, Tensor], params) -> Tensor:
    """1x1 combination of the channel-concatenated refined predictions.

    The fusion weight always spans every level; levels masked out by an
    ablation variant contribute constant zeros.
    """
    w = params["fuse.w"]
    n_levels = w.shape[1] // SCORE_CHANNELS
    if not refined or len(refined) > n_levels or any(not 0 <= l < n_levels for l in refined):
        raise ValueError(f"fuse: expected refined predictions for levels within 0..{n_levels - 1}, got {sorted(refined)}")
    like = next(iter(refined.values()))
    zeros = None
    parts = []
    for level in range(n_levels):
        if level in refined:
            parts.append(refined[level])
        else:
            if zeros is None:
                zeros = Tensor(np.zeros_like(like.data))
            parts.append(zeros)
    return conv2d(concat_channels(parts), w, params["fuse.b"])


def predict_all(
    integrated: dict[int, IntegratedFeature], conv1_features: Tensor, params, use_bpr: bool = True
) -> PredictionSet:
    levels = sorted(integrated)
    top = levels[-1]
    raw: dict[int, Tensor] = {}
    p_next = None
    for level in reversed(levels):
        p_next = predict_level(integrated[level], p_next, params, top)
        raw[level] = p_next
    refined = {
        l: refine_boundary(conv1_features, raw[l], params, l) if use_bpr else raw[l] for l in levels
    }
    fused = fuse(refined, params)
    return PredictionSet(
        levels=levels,
        raw=raw,
        refined=refined,
        fused=fused,
        level_probs={l: softmax_pair(refined[l]) for l in levels},
        fused_probs=softmax_pair(fused),
    )
