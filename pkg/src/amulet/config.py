"""Flat ``section.key = value`` run-config files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import SynthConfig
from .model import HeadsConfig, ModelConfig
from .rfc import RfcConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    empty_precision: float = 1.0
    empty_recall: float = 1.0
    infer_mode: str = "full"

    def validate(self) -> None:
        if self.infer_mode not in ("full", "fused-only"):
            raise ValueError(f"eval.infer_mode must be 'full' or 'fused-only', got {self.infer_mode!r}")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rfc: RfcConfig = field(default_factory=RfcConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: SynthConfig = field(default_factory=SynthConfig)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.rfc, self.heads)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        self.data.validate()


SECTIONS = [f.name for f in dataclasses.fields(RunConfig)]


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def set_key(cfg: RunConfig, key: str, raw: str, where: str = "") -> None:
    where = where or key
    if "." not in key:
        raise ConfigError(f"{where}: key {key!r} must have the form section.key")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown section {section!r}")
    obj = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names:
        raise ConfigError(f"{where}: unknown key {key!r}")
    setattr(obj, name, _parse_value(raw, getattr(obj, name), where))


def parse_config(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value, f"{source}:{lineno}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(), source=str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = ["# fully resolved run configuration"]
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
