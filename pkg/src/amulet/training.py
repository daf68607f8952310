"""Initialization, deeply supervised joint loss, augmentation and the SGD training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import Dataset, epoch_plan
from .heads import PredictionSet
from .model import AmuletNet
from .params import ParamSpec
from .tensor import Tape, Tensor, backward, balanced_bce_loss, sgd_step, weighted_sum

log = logging.getLogger(__name__)

PRETRAINED_LR = 1e-8  # rate suited to a pretrained VGG-16 backbone


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 4e-7
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_iters: int = 1000
    lr_decay_factor: float = 0.1
    plateau_window: int = 200
    plateau_threshold: float = 0.005
    min_lr: float = 4e-10
    seed: int = 0
    alpha_f: float = 1.0
    alpha_l: float = 1.0
    flip_beta: bool = False
    augment: bool = True
    checkpoint_every: int = 0
    stop_loss_fraction: float = 0.0

    def validate(self) -> None:
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("train.lr, train.momentum and train.weight_decay must be non-negative")
        if self.alpha_f < 0 or self.alpha_l < 0:
            raise ValueError("train.alpha_f and train.alpha_l must be non-negative")
        if self.batch_size < 1 or self.max_iters < 0:
            raise ValueError("train.batch_size must be positive and train.max_iters non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("train.lr_decay_factor must lie in (0, 1]")
        if self.plateau_window < 1:
            raise ValueError("train.plateau_window must be positive")


@dataclass
class TrainState:
    iteration: int = 0
    lr: float = 0.0
    loss_history: list[float] = field(default_factory=list)
    window_sum: float = 0.0
    window_count: int = 0
    prev_window_mean: float | None = None
    stopped: str = ""

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "lr": self.lr,
            "loss_history": self.loss_history,
            "window_sum": self.window_sum,
            "window_count": self.window_count,
            "prev_window_mean": self.prev_window_mean,
            "stopped": self.stopped,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainState":
        return cls(**d)


# ---------------------------------------------------------------------------
# initialization


def bilinear_kernel(factor: int) -> np.ndarray:
    """2m x 2m bilinear upsampling kernel for stride ``factor``."""
    k = 2 * factor
    center = factor - 0.5
    filt = 1 - np.abs(np.arange(k) - center) / factor
    return np.outer(filt, filt)


def init_msra(params: dict, specs: list[ParamSpec], seed: int) -> None:
    """Seeded He-normal init: N(0, 2/fan_in) weights, zero biases.

    Transposed-convolution kernels get a bilinear spatial profile scaled by a
    He-normal channel-mixing matrix (fan-in = input channels).
    """
    rng = np.random.default_rng(seed)
    for spec in specs:
        p = params[spec.name]
        dtype = p.data.dtype
        if spec.init == "zero":
            value = np.zeros(spec.shape)
        elif spec.init == "msra":
            fan_in = int(np.prod(spec.shape[1:]))
            value = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=spec.shape)
        elif spec.init == "bilinear":
            cin, cout = spec.shape[:2]
            mix = rng.normal(0.0, math.sqrt(2.0 / cin), size=(cin, cout))
            value = mix[:, :, None, None] * bilinear_kernel(spec.factor)
        else:
            raise ValueError(f"unknown init {spec.init!r} for {spec.name}")
        p.data[...] = value.astype(dtype)
        p.momentum[...] = 0
        p.grad[...] = 0


# ---------------------------------------------------------------------------
# loss


def joint_loss(
    preds: PredictionSet, gt, alpha_f: float = 1.0, alpha_l: float = 1.0, flip_beta: bool = False
) -> tuple[Tensor, dict]:
    """Weighted sum of the fused loss and every per-level loss.

    Returns the scalar loss tensor and the unweighted components keyed by
    ``"fused"`` and by level index.
    """
    terms = [balanced_bce_loss(preds.fused_probs, gt, flip_beta=flip_beta)]
    weights = [alpha_f]
    components = {"fused": float(terms[0].data)}
    for level in preds.levels:
        term = balanced_bce_loss(preds.level_probs[level], gt, flip_beta=flip_beta)
        terms.append(term)
        weights.append(alpha_l)
        components[level] = float(term.data)
    return weighted_sum(terms, weights), components


# ---------------------------------------------------------------------------
# augmentation


def augment(image: np.ndarray, mask: np.ndarray, variant: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply mirror x rotation variant 0..7 to the last two (spatial) axes of both arrays.

    ``variant // 4`` selects a horizontal mirror, ``variant % 4`` the number of
    90 degree counter-clockwise rotations.
    """
    if not 0 <= variant < 8:
        raise ValueError(f"augmentation variant must be in 0..7, got {variant}")
    mirror, rot = divmod(variant, 4)
    h, w = image.shape[-2:]
    if rot % 2 and h != w:
        raise ValueError(f"rotation by {90 * rot} degrees needs a square input, got {h}x{w}")

    def apply(a: np.ndarray) -> np.ndarray:
        if mirror:
            a = a[..., ::-1]
        if rot:
            a = np.rot90(a, rot, axes=(-2, -1))
        return np.ascontiguousarray(a)

    return apply(image), apply(mask)


# ---------------------------------------------------------------------------
# training loop


def make_batch(dataset: Dataset, indices, variants) -> tuple[np.ndarray, np.ndarray]:
    imgs, masks = [], []
    for i, v in zip(indices, variants):
        img, msk = dataset.images[i], dataset.masks[i]
        if v:
            img, msk = augment(img, msk, int(v))
        imgs.append(img)
        masks.append(msk)
    return np.stack(imgs), np.stack(masks)


def train_step(model: AmuletNet, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig, lr: float):
    dtype = next(iter(model.params.values())).data.dtype
    with Tape() as tape:
        preds = model(Tensor(images.astype(dtype, copy=False)))
        loss, parts = joint_loss(preds, masks, cfg.alpha_f, cfg.alpha_l, cfg.flip_beta)
    total = float(loss.data)
    if not math.isfinite(total):
        return total, parts
    backward(loss, tape)
    sgd_step(model.parameters, lr, cfg.momentum, cfg.weight_decay)
    return total, parts


def _update_plateau(state: TrainState, loss: float, cfg: TrainConfig) -> bool:
    """Track windowed mean loss; return True when a decay should happen."""
    state.window_sum += loss
    state.window_count += 1
    if state.window_count < cfg.plateau_window:
        return False
    mean = state.window_sum / state.window_count
    prev = state.prev_window_mean
    state.window_sum, state.window_count = 0.0, 0
    state.prev_window_mean = mean
    return prev is not None and (prev - mean) < cfg.plateau_threshold * abs(prev)


def loss_csv_header(n_levels: int) -> list[str]:
    return ["iteration", "total_loss", "loss_f"] + [f"loss_{l}" for l in range(n_levels)] + ["lr"]


def train(
    model: AmuletNet,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    iters: int | None = None,
) -> TrainState:
    """Run (or resume) momentum-SGD training.

    ``iters`` caps the number of iterations run in this call (defaults to
    reaching ``cfg.max_iters``). Checkpoints go to ``out_dir`` every
    ``cfg.checkpoint_every`` iterations and at the end, together with the
    loss log ``loss.csv``.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset has {len(dataset)} samples, fewer than batch size {cfg.batch_size}")
    if state is None:
        state = TrainState(lr=cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss.csv"
        fresh = state.iteration == 0 or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(loss_csv_header(model.cfg.backbone.levels))

    per_epoch = len(dataset) // cfg.batch_size
    end = cfg.max_iters if iters is None else min(cfg.max_iters, state.iteration + iters)
    first_loss = state.loss_history[0] if state.loss_history else None
    plan_epoch, plan = -1, None
    try:
        while state.iteration < end and not state.stopped:
            epoch, pos = divmod(state.iteration, per_epoch)
            if epoch != plan_epoch:
                plan = epoch_plan(len(dataset), cfg.batch_size, cfg.seed, epoch, cfg.augment)
                plan_epoch = epoch
            indices, variants = plan[pos]
            images, masks = make_batch(dataset, indices, variants)
            lr_used = state.lr
            total, parts = train_step(model, images, masks, cfg, lr_used)
            if not math.isfinite(total):
                raise TrainingDiverged(f"non-finite loss {total} at iteration {state.iteration}")
            state.iteration += 1
            state.loss_history.append(total)
            if first_loss is None:
                first_loss = total
            if writer is not None:
                row = [state.iteration, repr(total), repr(parts["fused"])]
                row += [repr(parts[l]) if l in parts else "" for l in range(model.cfg.backbone.levels)]
                row.append(repr(lr_used))
                writer.writerow(row)
            if _update_plateau(state, total, cfg):
                if state.lr <= cfg.min_lr:
                    state.stopped = "plateau at minimum learning rate"
                else:
                    state.lr *= cfg.lr_decay_factor
                    log.info("iteration %d: loss plateau, lr -> %g", state.iteration, state.lr)
            if cfg.stop_loss_fraction and total < cfg.stop_loss_fraction * first_loss:
                state.stopped = f"loss below {cfg.stop_loss_fraction} of initial"
            if out is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                checkpoint.save(out / f"ckpt_{state.iteration:06d}.amlt", model, state, cfg.seed)
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        checkpoint.save(out / "final.amlt", model, state, cfg.seed)
    return state
