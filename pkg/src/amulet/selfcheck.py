"""Finite-difference check of the full network's joint-loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig
from .model import AmuletNet, HeadsConfig, ModelConfig, forward
from .params import param_group
from .rfc import RfcConfig
from .tensor import Tensor, gradcheck
from .training import init_msra, joint_loss


def miniature_config(use_bpr: bool = True) -> ModelConfig:
    """3-level network on 8x8 inputs with a handful of channels per level."""
    return ModelConfig(
        BackboneConfig(levels=3, convs_per_level=(1, 1, 1), channels_per_level=(3, 4, 4), input_size=(8, 8)),
        RfcConfig(per_level_channels=3, combined_channels=3),
        HeadsConfig(use_bpr=use_bpr),
    )


@dataclass
class GroupResult:
    group: str
    worst: float
    checked: int
    excluded: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.worst < self.tolerance


def check_network(
    cfg: ModelConfig | None = None,
    seed: int = 0,
    per_param: int = 8,
    epsilon: float = 1e-3,
    tolerance: float = 1e-3,
    batch: int = 2,
) -> list[GroupResult]:
    """Gradcheck ``per_param`` sampled coordinates of every parameter; report per group.

    Biases get small random offsets so every coordinate sits in general
    position rather than at the zero initialization.
    """
    cfg = cfg or miniature_config()
    model = AmuletNet(cfg, dtype=np.float64)
    init_msra(model.params, model.specs, seed)
    rng = np.random.default_rng([seed, 1])
    for spec in model.specs:
        if spec.init == "zero":
            model.params[spec.name].data[...] = rng.normal(0.0, 0.1, spec.shape)
    h, w = cfg.backbone.input_size
    image = rng.random((batch, cfg.backbone.in_channels, h, w))
    gt = (rng.random((batch, 1, h, w)) < 0.4).astype(np.float64)
    gt[:, 0, 0, 0], gt[:, 0, -1, -1] = 1.0, 0.0  # both classes present

    names = list(model.params)
    img_t = Tensor(image)

    def loss_fn(*xs):
        preds = forward(cfg, dict(zip(names, xs)), img_t)
        return joint_loss(preds, gt)[0]

    indices = []
    for name in names:
        size = model.params[name].data.size
        indices.append(sorted(rng.choice(size, size=min(per_param, size), replace=False).tolist()))
    report = gradcheck(loss_fn, [model.params[n] for n in names], epsilon, tolerance, indices)

    groups: dict[str, GroupResult] = {}
    for name, err, n_ok, n_skip in zip(names, report.max_rel_error, report.checked, report.excluded):
        g = groups.setdefault(param_group(name), GroupResult(param_group(name), 0.0, 0, 0, tolerance))
        g.worst = max(g.worst, err)
        g.checked += n_ok
        g.excluded += n_skip
    return list(groups.values())
