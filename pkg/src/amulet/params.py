"""Named parameter specifications and the ordered parameter store."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DEFAULT_DTYPE, Parameter


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "msra", "bilinear", or "zero"
    factor: int = 1  # upsampling factor for bilinear kernels


def build_params(specs: list[ParamSpec], dtype=DEFAULT_DTYPE) -> dict[str, Parameter]:
    params = {}
    for spec in specs:
        if spec.name in params:
            raise ValueError(f"duplicate parameter name {spec.name!r}")
        params[spec.name] = Parameter(np.zeros(spec.shape, dtype=dtype), name=spec.name)
    return params


def param_group(name: str) -> str:
    """Coarse group label used by gradient-check reports, e.g. ``rfc.extend``."""
    parts = name.split(".")
    if parts[0] == "backbone":
        return "backbone"
    if parts[0] == "fuse":
        return "fuse"
    return f"{parts[0]}.{parts[2]}"
