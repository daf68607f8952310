"""Saliency evaluation: adaptive-threshold F-measure, MAE and 256-level PR curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

BETA2 = 0.3
LEVELS = 256


def quantize(saliency: np.ndarray) -> np.ndarray:
    """Snap a [0, 1] map to the 8-bit grid used for storage and PR curves."""
    return np.round(np.clip(saliency, 0.0, 1.0) * 255) / 255.0


def adaptive_threshold(saliency: np.ndarray) -> float:
    """Twice the mean saliency, clamped to 1."""
    return min(2.0 * float(np.mean(saliency)), 1.0)


def precision_recall(
    saliency: np.ndarray,
    gt: np.ndarray,
    threshold: float,
    empty_precision: float = 1.0,
    empty_recall: float = 1.0,
) -> tuple[float, float]:
    pred = np.asarray(saliency) >= threshold
    g = np.asarray(gt) > 0.5
    tp = int(np.count_nonzero(pred & g))
    n_pred = int(np.count_nonzero(pred))
    n_gt = int(np.count_nonzero(g))
    precision = tp / n_pred if n_pred else empty_precision
    recall = tp / n_gt if n_gt else empty_recall
    return precision, recall


def f_measure(precision: float, recall: float, beta2: float = BETA2) -> float:
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return (1 + beta2) * precision * recall / denom


def mae(saliency: np.ndarray, gt: np.ndarray) -> float:
    s, g = np.asarray(saliency, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if s.shape != g.shape:
        raise ValueError(f"mae: shape mismatch {s.shape} vs {g.shape}")
    return float(np.mean(np.abs(s - g)))


def pr_curve(
    saliency: np.ndarray, gt: np.ndarray, empty_precision: float = 1.0, empty_recall: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at thresholds k/255, k = 0..255, on the 8-bit quantized map."""
    q = np.round(np.clip(np.asarray(saliency, dtype=np.float64), 0, 1) * 255).astype(np.int64).ravel()
    g = (np.asarray(gt) > 0.5).ravel()
    fg = np.bincount(q[g], minlength=LEVELS)
    allc = np.bincount(q, minlength=LEVELS)
    tp = np.cumsum(fg[::-1])[::-1]  # pixels with q >= k that are foreground
    n_pred = np.cumsum(allc[::-1])[::-1]
    n_gt = int(g.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), empty_precision)
    recall = tp / n_gt if n_gt else np.full(LEVELS, float(empty_recall))
    return precision.astype(np.float64), np.asarray(recall, dtype=np.float64)


@dataclass
class ImageReport:
    image: str
    precision: float
    recall: float
    fbeta: float
    mae: float
    pr_precision: np.ndarray
    pr_recall: np.ndarray


@dataclass
class EvalReport:
    """Dataset-level metrics plus the per-image rows they were computed from."""

    precision: float
    recall: float
    fbeta: float
    mae: float
    pr_precision: np.ndarray
    pr_recall: np.ndarray
    fbeta_per_image_mean: float
    images: list[ImageReport] = field(default_factory=list)


def quantized_mae(levels: np.ndarray, gt: np.ndarray) -> float:
    """MAE of an 8-bit map (integer levels 0..255) from an exact integer numerator."""
    g = (np.asarray(gt) > 0.5).astype(np.int64)
    q = np.asarray(levels, dtype=np.int64)
    if q.shape != g.shape:
        raise ValueError(f"mae: shape mismatch {q.shape} vs {g.shape}")
    return int(np.abs(q - 255 * g).sum()) / (255 * q.size)


def evaluate_image(saliency: np.ndarray, gt: np.ndarray, name: str = "", conventions=(1.0, 1.0)) -> ImageReport:
    """Metrics of one map; everything is computed on the 8-bit quantized map."""
    s = quantize(np.asarray(saliency, dtype=np.float64)).reshape(np.shape(gt))
    g = (np.asarray(gt) > 0.5).astype(np.float64)
    t = adaptive_threshold(s)
    p, r = precision_recall(s, g, t, *conventions)
    pp, rr = pr_curve(s, g, *conventions)
    err = quantized_mae(np.round(s * 255).astype(np.int64), g)
    return ImageReport(name, p, r, f_measure(p, r), err, pp, rr)


def aggregate(images: list[ImageReport]) -> EvalReport:
    """Average P and R over images, then take F of the averages (per-image F mean kept alongside)."""
    if not images:
        raise ValueError("aggregate: no images")
    p = float(np.mean([im.precision for im in images]))
    r = float(np.mean([im.recall for im in images]))
    return EvalReport(
        precision=p,
        recall=r,
        fbeta=f_measure(p, r),
        mae=float(np.mean([im.mae for im in images])),
        pr_precision=np.mean([im.pr_precision for im in images], axis=0),
        pr_recall=np.mean([im.pr_recall for im in images], axis=0),
        fbeta_per_image_mean=float(np.mean([im.fbeta for im in images])),
        images=list(images),
    )


def evaluate(saliency_maps, gts, names=None, conventions=(1.0, 1.0)) -> EvalReport:
    names = names if names is not None else [str(i) for i in range(len(gts))]
    return aggregate([evaluate_image(s, g, n, conventions) for s, g, n in zip(saliency_maps, gts, names)])


def write_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "fbeta", "mae", "precision", "recall"])
        for im in report.images:
            w.writerow([im.image, repr(im.fbeta), repr(im.mae), repr(im.precision), repr(im.recall)])
        w.writerow(["__dataset__", repr(report.fbeta), repr(report.mae), repr(report.precision), repr(report.recall)])


def write_pr_csv(path, precision: np.ndarray, recall: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for k in range(LEVELS):
            w.writerow([repr(k / 255), repr(float(precision[k])), repr(float(recall[k]))])
