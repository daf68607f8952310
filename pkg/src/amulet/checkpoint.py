"""Binary checkpoint format.

Layout (little-endian)::

    b"AMLT" | u32 version | u32 count | count x record      (parameter values)
            | u32 count | count x record                     (momentum buffers)
            | u32 length | JSON trailer (RNG state, train state, model config)

    record = u32 name_len | name utf-8 | u32 rank | rank x u32 extent | float32 values
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AMLT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_records(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_records(buf: memoryview, pos: int, path: str) -> tuple[dict[str, np.ndarray], int]:
    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    return arrays, pos


def model_config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def save(path: str | os.PathLike, model, state, seed: int) -> None:
    trailer = {
        "rng": {"seed": seed, "iteration": state.iteration},
        "train_state": state.to_json(),
        "model_config": model_config_dict(model.cfg),
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_records(fh, {k: p.data for k, p in model.params.items()})
        _write_records(fh, {k: p.momentum for k, p in model.params.items()})
        raw = json.dumps(trailer, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> tuple[dict, dict, dict]:
    """Return (values, momenta, trailer)."""
    path = str(path)
    with open(path, "rb") as fh:
        buf = memoryview(fh.read())
    if bytes(buf[:4]) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes at byte 0")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    values, pos = _read_records(buf, 8, path)
    momenta, pos = _read_records(buf, pos, path)
    (tlen,) = struct.unpack("<I", buf[pos : pos + 4])
    trailer = json.loads(bytes(buf[pos + 4 : pos + 4 + tlen]).decode("utf-8"))
    return values, momenta, trailer


def load_into(model, values: dict, momenta: dict | None = None) -> None:
    """Copy arrays into ``model.params``; raise naming the first mismatching parameter."""
    for name, p in model.params.items():
        if name not in values:
            raise CheckpointError(f"parameter {name} missing from checkpoint")
        if values[name].shape != p.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {values[name].shape} != model shape {p.shape}")
    extra = [k for k in values if k not in model.params]
    if extra:
        raise CheckpointError(f"parameter {extra[0]} in checkpoint is not part of the model")
    for name, p in model.params.items():
        p.data[...] = values[name]
        p.momentum[...] = momenta[name] if momenta is not None else 0
        p.grad[...] = 0


def model_config_from(trailer: dict):
    from .backbone import BackboneConfig
    from .model import HeadsConfig, ModelConfig
    from .rfc import RfcConfig

    d = trailer["model_config"]
    bb = dict(d["backbone"])
    for k in ("convs_per_level", "channels_per_level", "input_size"):
        bb[k] = tuple(bb[k])
    return ModelConfig(BackboneConfig(**bb), RfcConfig(**d["rfc"]), HeadsConfig(**d["heads"]))
