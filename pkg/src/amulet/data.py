"""Synthetic saliency data, PPM/PGM codecs, and seeded batch iteration."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

SHAPES = ("disc", "rectangle", "triangle", "ring", "blob")
BACKGROUNDS = ("flat", "gradient", "noise-texture")
FG_RANGE = (0.02, 0.7)


class FormatError(ValueError):
    """Malformed image file; the message names the file and byte offset."""


# ---------------------------------------------------------------------------
# PPM / PGM


def _read_header(buf: bytes, path: str) -> tuple[str, int, int, int, int]:
    tokens: list[str] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError(f"{path}: truncated header at byte {pos}")
        if buf[pos : pos + 1] == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tok = buf[start:pos].decode("ascii", "replace")
        if not tokens:
            if tok not in ("P5", "P6"):
                raise FormatError(f"{path}: bad magic {tok!r} at byte {start}")
        elif not tok.isdigit():
            raise FormatError(f"{path}: expected integer, got {tok!r} at byte {start}")
        tokens.append(tok)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header at byte {pos}")
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit files (maxval 255) are supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive extent {w}x{h}")
    return magic, w, h, maxval, pos + 1


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5/P6 file as uint8 array [C, H, W]."""
    path = str(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, w, h, _, offset = _read_header(buf, path)
    channels = 3 if magic == "P6" else 1
    need = w * h * channels
    if len(buf) - offset < need:
        raise FormatError(f"{path}: pixel data truncated at byte {len(buf)} (need {need} bytes from {offset})")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return arr.reshape(h, w, channels).transpose(2, 0, 1).copy()


def write_pnm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Write uint8 [C, H, W] (C = 1 -> P5, C = 3 -> P6)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError(f"write_pnm expects uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        pixels = pixels[None]
    c, h, w = pixels.shape
    magic = {1: b"P5", 3: b"P6"}.get(c)
    if magic is None:
        raise ValueError(f"write_pnm: need 1 or 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


def write_saliency(path: str | os.PathLike, saliency: np.ndarray) -> None:
    """Write a [H, W] or [1, H, W] map in [0, 1] as P5 with values round(255 * S)."""
    write_pnm(path, to_uint8(np.asarray(saliency).reshape((1,) + np.asarray(saliency).shape[-2:])))


def read_map(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 map as float [H, W] in [0, 1]."""
    return read_pnm(path)[0].astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# samples and datasets


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [1, H, W] float32 in {0, 1}
    id: str


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W]
    masks: np.ndarray  # [N, 1, H, W]
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "Dataset":
        if not samples:
            return cls(np.zeros((0, 3, 1, 1), np.float32), np.zeros((0, 1, 1, 1), np.float32), [])
        return cls(
            np.stack([s.image for s in samples]),
            np.stack([s.mask for s in samples]),
            [s.id for s in samples],
        )

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], self.masks[idx], [self.ids[i] for i in idx])


def load_sample(image_path, mask_path, sample_id: str | None = None) -> Sample:
    img = read_pnm(image_path)
    msk = read_pnm(mask_path)
    if img.shape[0] != 3:
        raise FormatError(f"{image_path}: expected a P6 colour image at byte 0")
    if msk.shape[0] != 1:
        raise FormatError(f"{mask_path}: expected a P5 greyscale mask at byte 0")
    if img.shape[1:] != msk.shape[1:]:
        raise FormatError(
            f"extent mismatch: {image_path} is {img.shape[2]}x{img.shape[1]} but "
            f"{mask_path} is {msk.shape[2]}x{msk.shape[1]}"
        )
    sid = sample_id if sample_id is not None else Path(image_path).stem
    return Sample(img.astype(np.float32) / 255.0, (msk >= 128).astype(np.float32), sid)


def read_manifest(root: str | os.PathLike) -> list[tuple[str, Path, Path]]:
    root = Path(root)
    rows = []
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "id":
                continue
            if len(row) != 3:
                raise FormatError(f"{root / 'manifest.csv'}: expected id,image_path,mask_path, got {row}")
            sid, ip, mp = row
            rows.append((sid, root / ip, root / mp))
    return rows


def load_dataset(root: str | os.PathLike) -> Dataset:
    return Dataset.from_samples([load_sample(ip, mp, sid) for sid, ip, mp in read_manifest(root)])


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthConfig:
    count: int = 100
    size: int = 64
    shapes: tuple[str, ...] = SHAPES
    contrast_range: tuple[float, float] = (0.25, 0.8)
    backgrounds: tuple[str, ...] = BACKGROUNDS
    multi_object_prob: float = 0.25
    boundary_touch_prob: float = 0.2
    noise: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.count < 0 or self.size < 8:
            raise ValueError("data.count must be >= 0 and data.size >= 8")
        bad = [s for s in self.shapes if s not in SHAPES]
        if bad or not self.shapes:
            raise ValueError(f"unknown or empty shape list: {bad or self.shapes}")
        bad = [b for b in self.backgrounds if b not in BACKGROUNDS]
        if bad or not self.backgrounds:
            raise ValueError(f"unknown or empty background list: {bad or self.backgrounds}")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi:
            raise ValueError(f"data.contrast_range must satisfy 0 < low <= high, got {self.contrast_range}")
        for name in ("multi_object_prob", "boundary_touch_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"data.{name} must be a probability")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")  # (y, x)


def disc_mask(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    y, x = _grid(size)
    return (y - cy) ** 2 + (x - cx) ** 2 <= r * r


def ring_mask(size: int, cy: float, cx: float, r_out: float, r_in: float) -> np.ndarray:
    y, x = _grid(size)
    d2 = (y - cy) ** 2 + (x - cx) ** 2
    return (d2 <= r_out * r_out) & (d2 >= r_in * r_in)


def rectangle_mask(size: int, cy: float, cx: float, hh: float, hw: float, angle: float) -> np.ndarray:
    y, x = _grid(size)
    ca, sa = np.cos(angle), np.sin(angle)
    u = (x - cx) * ca + (y - cy) * sa
    v = -(x - cx) * sa + (y - cy) * ca
    return (np.abs(u) <= hw) & (np.abs(v) <= hh)


def triangle_mask(size: int, pts: np.ndarray) -> np.ndarray:
    y, x = _grid(size)
    inside_pos = np.ones_like(x, dtype=bool)
    inside_neg = np.ones_like(x, dtype=bool)
    for i in range(3):
        (y0, x0), (y1, x1) = pts[i], pts[(i + 1) % 3]
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


def blob_mask(size: int, cy: float, cx: float, r: float, amps: np.ndarray, phases: np.ndarray) -> np.ndarray:
    y, x = _grid(size)
    theta = np.arctan2(y - cy, x - cx)
    radius = r * (1 + sum(a * np.cos((k + 2) * theta + p) for k, (a, p) in enumerate(zip(amps, phases))))
    return (y - cy) ** 2 + (x - cx) ** 2 <= radius**2


def _random_shape(rng: np.random.Generator, kind: str, size: int, touch: bool, scale: float) -> np.ndarray:
    r = rng.uniform(0.12, 0.3) * size * scale
    if touch:
        edge = rng.integers(4)
        along = rng.uniform(0.2, 0.8) * size
        depth = rng.uniform(0.0, 0.5) * r
        cy, cx = [(depth, along), (size - depth, along), (along, depth), (along, size - depth)][edge]
    else:
        margin = r + 1
        cy, cx = rng.uniform(margin, size - margin, size=2)
    if kind == "disc":
        return disc_mask(size, cy, cx, r)
    if kind == "ring":
        return ring_mask(size, cy, cx, r * 1.2, r * rng.uniform(0.45, 0.65))
    if kind == "rectangle":
        aspect = rng.uniform(0.5, 1.5)
        return rectangle_mask(size, cy, cx, r * 0.85 * aspect, r * 0.85 / aspect, rng.uniform(0, np.pi))
    if kind == "triangle":
        ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, 3)
        rr = r * 1.3 * rng.uniform(0.8, 1.1, 3)
        pts = np.stack([cy + rr * np.sin(ang), cx + rr * np.cos(ang)], axis=1)
        return triangle_mask(size, pts)
    return blob_mask(size, cy, cx, r, rng.uniform(0, 0.2, 3), rng.uniform(0, 2 * np.pi, 3))


def _background(rng: np.random.Generator, kind: str, size: int, base: np.ndarray) -> np.ndarray:
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    if kind == "gradient":
        y, x = _grid(size)
        ang = rng.uniform(0, 2 * np.pi)
        ramp = ((x * np.cos(ang) + y * np.sin(ang)) / size)[None]
        img += rng.uniform(-0.25, 0.25, 3)[:, None, None] * ramp
    elif kind == "noise-texture":
        tex = ndimage.gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, 2, 2))
        img += 0.6 * tex
    return img


def _contrast_color(rng: np.random.Generator, base: np.ndarray, lo: float, hi: float) -> np.ndarray:
    for _ in range(100):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        color = base + rng.uniform(lo, hi) * direction
        if np.all((color >= 0) & (color <= 1)):
            return color
    return np.where(base > 0.5, base - hi / np.sqrt(3), base + hi / np.sqrt(3)).clip(0, 1)


def synth_sample(cfg: SynthConfig, index: int) -> Sample:
    """Deterministically render sample ``index`` (independent of ``cfg.count``)."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    lo, hi = cfg.contrast_range
    while True:
        multi = rng.random() < cfg.multi_object_prob
        n_obj = int(rng.integers(2, 4)) if multi else 1
        scale = 0.75 if multi else 1.0
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(n_obj):
            kind = cfg.shapes[rng.integers(len(cfg.shapes))]
            mask |= _random_shape(rng, kind, size, rng.random() < cfg.boundary_touch_prob, scale)
        frac = mask.mean()
        if not FG_RANGE[0] <= frac <= FG_RANGE[1]:
            continue
        if multi and ndimage.label(mask)[1] < 2:
            continue
        break
    base = rng.uniform(0.15, 0.85, 3)
    img = _background(rng, cfg.backgrounds[rng.integers(len(cfg.backgrounds))], size, base)
    color = _contrast_color(rng, base, lo, hi)
    shading = 0.05 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 3)
    img = np.where(mask[None], color[:, None, None] + shading[None], img)
    img += cfg.noise * rng.standard_normal(img.shape)
    pixels = to_uint8(img)
    return Sample(pixels.astype(np.float32) / 255.0, mask[None].astype(np.float32), f"s{index:05d}")


def generate_synthetic(cfg: SynthConfig, out_dir: str | os.PathLike) -> Path:
    """Write ``images/``, ``masks/`` and ``manifest.csv`` under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    lines = []
    for i in range(cfg.count):
        s = synth_sample(cfg, i)
        ip, mp = f"images/{s.id}.ppm", f"masks/{s.id}.pgm"
        write_pnm(out / ip, to_uint8(s.image))
        write_pnm(out / mp, (s.mask * 255).astype(np.uint8))
        lines.append(f"{s.id},{ip},{mp}\n")
    with open(out / "manifest.csv", "w") as fh:
        fh.writelines(lines)
    return out


def synth_dataset(cfg: SynthConfig, start: int = 0) -> Dataset:
    """In-memory equivalent of :func:`generate_synthetic` (same pixels)."""
    cfg.validate()
    return Dataset.from_samples([synth_sample(cfg, i) for i in range(start, start + cfg.count)])


# ---------------------------------------------------------------------------
# batching


def epoch_plan(n: int, batch_size: int, seed: int, epoch: int, augment_on: bool):
    """Shuffled batches for one epoch as ``[(indices, variants), ...]``; the partial tail is dropped."""
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n)
    variants = rng.integers(0, 8, size=n) if augment_on else np.zeros(n, dtype=np.int64)
    return [
        (perm[b * batch_size : (b + 1) * batch_size], variants[b * batch_size : (b + 1) * batch_size])
        for b in range(n // batch_size)
    ]


def batches(
    dataset: Dataset, batch_size: int, seed: int, augment_on: bool, epochs: int = 1
) -> Iterator[tuple[np.ndarray, np.ndarray, list[str]]]:
    from .training import make_batch

    for epoch in range(epochs):
        for idx, var in epoch_plan(len(dataset), batch_size, seed, epoch, augment_on):
            imgs, masks = make_batch(dataset, idx, var)
            yield imgs, masks, [dataset.ids[i] for i in idx]
