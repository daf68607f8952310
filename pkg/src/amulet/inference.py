"""Saliency inference from a prediction set."""

from __future__ import annotations

import numpy as np

from .heads import PredictionSet


def normalize_minmax(raw: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling of [N, 1, H, W] maps; constant images become zeros."""
    out = np.zeros_like(raw, dtype=np.float64)
    for i, m in enumerate(raw):
        lo, hi = m.min(), m.max()
        if hi > lo:
            out[i] = (m - lo) / (hi - lo)
    return out


def contrast_map(level_contrasts: list[np.ndarray], fused_contrast: np.ndarray) -> np.ndarray:
    """relu(mean of per-level contrasts + fused contrast), before normalization."""
    mean = sum(np.asarray(c, dtype=np.float64) for c in level_contrasts) / len(level_contrasts)
    return np.maximum(mean + fused_contrast, 0.0)


def infer(preds: PredictionSet) -> np.ndarray:
    """Mean level contrast plus fused contrast, rectified and min-max normalized; [N, 1, H, W]."""
    pairs = preds.excitations()
    level = [fe.astype(np.float64) - be for fe, be in pairs[:-1]]
    fe, be = pairs[-1]
    return normalize_minmax(contrast_map(level, fe.astype(np.float64) - be))


def infer_fused_only(preds: PredictionSet) -> np.ndarray:
    """Foreground excitation of the fused prediction; [N, 1, H, W]."""
    return preds.fused_probs.data[:, 1:2].astype(np.float64)
