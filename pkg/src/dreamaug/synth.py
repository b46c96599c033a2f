"""Procedural multi-domain shape/texture benchmark.

Class = shape (disk, square, triangle, cross, ring). Domain = texture family
(flat colour, oriented stripes, checkerboard, filtered noise). Inside the
"flat" domain the foreground colour is a per-class signature colour, which
makes texture a shortcut for the label there; in the other domains every
colour and texture parameter is drawn independently of the class.

Every image is drawn from its own PCG64 stream keyed by
(seed, domain index, class index, image index), so generation order does not
matter. Pixel values are quantized to multiples of 1/255 so that the
in-memory dataset and its PPM dump are identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DataError, FormatError
from .ppm import read_ppm, write_ppm

DOMAINS = ("flat", "stripes", "checker", "noise")
CLASSES = ("disk", "square", "triangle", "cross", "ring")

SIGNATURE_COLORS = np.array([
    [0.90, 0.12, 0.12],
    [0.12, 0.78, 0.18],
    [0.18, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.18, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.35, 0.15],
])

SUPERSAMPLE = 4
# probability that foreground and background palettes have opposite luminance
# polarity in the textured domains; otherwise the figure differs only by texture
OPPOSITE_POLARITY = 0.8


def _grid(size: int) -> tuple:
    t = (np.arange(size * SUPERSAMPLE) + 0.5) / (size * SUPERSAMPLE)
    return np.meshgrid(t, t, indexing="xy")


def _inside(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "triangle":
        # equilateral, apex up (image y grows downward)
        R = 1.15 * r
        inside = np.ones_like(dx, dtype=bool)
        for deg in (90.0, 210.0, 330.0):
            a = np.deg2rad(deg)
            inside &= dx * np.cos(a) + dy * np.sin(a) <= R / 2
        return inside
    if shape == "cross":
        arm = r / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ConfigError(f"unknown shape {shape!r}")


def shape_coverage(shape: str, size: int, gen: np.random.Generator) -> np.ndarray:
    """Anti-aliased [size, size] coverage mask with +-10% position and scale jitter."""
    gx, gy = _grid(size)
    cx = 0.5 + gen.uniform(-0.1, 0.1)
    cy = 0.5 + gen.uniform(-0.1, 0.1)
    r = 0.3 * (1.0 + gen.uniform(-0.1, 0.1))
    hit = _inside(shape, gx - cx, gy - cy, r).astype(np.float64)
    return hit.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _pixel_coords(size: int) -> tuple:
    t = np.arange(size, dtype=np.float64)
    return np.meshgrid(t, t, indexing="xy")


def _lerp(c1: np.ndarray, c2: np.ndarray, s: np.ndarray) -> np.ndarray:
    return c1[:, None, None] * (1.0 - s) + c2[:, None, None] * s


def _palette(gen: np.random.Generator, light: bool) -> tuple:
    lo, hi = (0.55, 1.0) if light else (0.0, 0.45)
    return gen.uniform(lo, hi, size=3), gen.uniform(lo, hi, size=3)


def _blur(field: np.ndarray, sigma: float) -> np.ndarray:
    radius = int(np.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k /= k.sum()
    out = field
    for axis in (0, 1):
        padded = np.concatenate([out.take(range(-radius, 0), axis=axis), out,
                                 out.take(range(radius), axis=axis)], axis=axis)
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for i, w in enumerate(k):
            acc += w * padded.take(range(i, i + n), axis=axis)
        out = acc
    return out


def domain_texture(domain: str, size: int, gen: np.random.Generator, light: bool, variant: int) -> np.ndarray:
    """[3, size, size] texture of one family. ``variant`` 0 = foreground, 1 = background."""
    x, y = _pixel_coords(size)
    c1, c2 = _palette(gen, light)
    if domain == "stripes":
        theta = gen.uniform(0, np.pi) + variant * np.pi / 2
        period = gen.uniform(3.0, 6.0)
        phase = gen.uniform(0, 1)
        s = 0.5 + 0.5 * np.sin(2 * np.pi * ((x * np.cos(theta) + y * np.sin(theta)) / period + phase))
        return _lerp(c1, c2, s)
    if domain == "checker":
        cell = int(gen.integers(2, 5)) + 2 * variant
        px, py = gen.integers(0, cell, size=2)
        s = ((np.floor((x + px) / cell) + np.floor((y + py) / cell)) % 2).astype(np.float64)
        return _lerp(c1, c2, s)
    if domain == "noise":
        field = _blur(gen.standard_normal((size, size)), 1.0 + variant)
        lo, hi = field.min(), field.max()
        s = (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)
        return _lerp(c1, c2, s)
    if domain == "flat":
        return _lerp(c1, c1, np.zeros((size, size)))
    raise ConfigError(f"unknown domain {domain!r}")


def _contrasting_color(gen: np.random.Generator, ref: np.ndarray, min_dist: float = 0.6) -> np.ndarray:
    while True:
        c = gen.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(c - ref) >= min_dist:
            return c


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255) / 255.0


def render_flat(shape: str, fg_color: np.ndarray, size: int, gen: np.random.Generator) -> np.ndarray:
    cov = shape_coverage(shape, size, gen)
    fg = np.clip(fg_color + gen.uniform(-0.05, 0.05, size=3), 0, 1)
    bg = _contrasting_color(gen, fg)
    return _quantize(fg[:, None, None] * cov + bg[:, None, None] * (1.0 - cov))


def render(domain: str, class_idx: int, size: int, gen: np.random.Generator, classes=CLASSES) -> np.ndarray:
    shape = classes[class_idx]
    if domain == "flat":
        return render_flat(shape, SIGNATURE_COLORS[class_idx % len(SIGNATURE_COLORS)], size, gen)
    cov = shape_coverage(shape, size, gen)
    light_fg = bool(gen.integers(2))
    light_bg = (not light_fg) if gen.uniform() < OPPOSITE_POLARITY else light_fg
    fg = domain_texture(domain, size, gen, light_fg, 0)
    bg = domain_texture(domain, size, gen, light_bg, 1)
    return _quantize(fg * cov + bg * (1.0 - cov))


@dataclass
class DomainDataset:
    """Images indexed [domain, class, sample, channel, y, x], raw values in [0, 1]."""

    images: np.ndarray
    domains: tuple
    classes: tuple
    seed: int
    per_cell: int
    size: int

    def domain_index(self, name: str) -> int:
        try:
            return self.domains.index(name)
        except ValueError as exc:
            raise DataError(f"unknown domain {name!r}; have {list(self.domains)}") from exc

    def split(self, domains: Optional[Sequence[str]] = None) -> tuple:
        """Flattened (images, labels, domain ids) for the named domains (all by default)."""
        names = list(self.domains) if domains is None else list(domains)
        if not names:
            raise DataError("at least one domain is required")
        ids = [self.domain_index(d) for d in names]
        imgs = self.images[ids].reshape(-1, 3, self.size, self.size)
        c, k = len(self.classes), self.per_cell
        labels = np.tile(np.repeat(np.arange(c), k), len(ids))
        dom = np.repeat(np.asarray(ids), c * k)
        return imgs, labels, dom

    def normalization(self, domains: Optional[Sequence[str]] = None) -> tuple:
        imgs, _, _ = self.split(domains)
        mean = imgs.mean(axis=(0, 2, 3))
        std = imgs.std(axis=(0, 2, 3))
        return tuple(mean.tolist()), tuple(std.tolist())

    def manifest(self) -> dict:
        mean, std = self.normalization()
        return {
            "format": "dreamaug-synth-1",
            "seed": self.seed,
            "per_cell": self.per_cell,
            "size": self.size,
            "domains": list(self.domains),
            "classes": list(self.classes),
            "counts": {d: {c: self.per_cell for c in self.classes} for d in self.domains},
            "normalization": {"mean": list(mean), "std": list(std)},
        }


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return (images - m) / s


def denormalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return images * s + m


def generate(seed: int, per_cell: int, size: int = 32, domains=DOMAINS, classes=CLASSES) -> DomainDataset:
    if per_cell < 2:
        raise ConfigError(f"per_cell must be >= 2 so every image has a same-class partner, got {per_cell}")
    if size < 8:
        raise ConfigError(f"image size must be >= 8, got {size}")
    if len(classes) > len(SIGNATURE_COLORS):
        raise ConfigError(f"at most {len(SIGNATURE_COLORS)} classes are supported")
    for d in domains:
        if d not in DOMAINS:
            raise ConfigError(f"unknown domain {d!r}; choose from {list(DOMAINS)}")
    for c in classes:
        if c not in CLASSES:
            raise ConfigError(f"unknown class {c!r}; choose from {list(CLASSES)}")
    images = np.empty((len(domains), len(classes), per_cell, 3, size, size))
    for di, d in enumerate(domains):
        dkey = DOMAINS.index(d)
        for ci in range(len(classes)):
            for k in range(per_cell):
                gen = rngmod.stream(seed, rngmod.DATASET, dkey, ci, k)
                images[di, ci, k] = render(d, ci, size, gen, classes)
    return DomainDataset(images, tuple(domains), tuple(classes), seed, per_cell, size)


@dataclass
class CueConflictSet:
    images: np.ndarray
    shape_labels: np.ndarray
    texture_labels: np.ndarray


def make_cue_conflict(dataset: DomainDataset, seed: int, n: int) -> CueConflictSet:
    """Flat-family probes: shape of class i filled with the signature colour of class j != i."""
    c = len(dataset.classes)
    gen = rngmod.stream(seed, rngmod.PROBE)
    shape_labels = gen.integers(0, c, size=n)
    offsets = gen.integers(1, c, size=n)
    texture_labels = (shape_labels + offsets) % c
    images = np.empty((n, 3, dataset.size, dataset.size))
    for k in range(n):
        img_gen = rngmod.stream(seed, rngmod.PROBE, k)
        images[k] = render_flat(dataset.classes[shape_labels[k]], SIGNATURE_COLORS[texture_labels[k]],
                                dataset.size, img_gen)
    return CueConflictSet(images, shape_labels, texture_labels)


def save_dataset(dataset: DomainDataset, root) -> str:
    os.makedirs(root, exist_ok=True)
    for di, d in enumerate(dataset.domains):
        for ci, c in enumerate(dataset.classes):
            folder = os.path.join(root, d, c)
            os.makedirs(folder, exist_ok=True)
            for k in range(dataset.per_cell):
                write_ppm(dataset.images[di, ci, k], os.path.join(folder, f"{k:05d}.ppm"))
    path = os.path.join(root, "manifest.json")
    with open(path, "w") as fh:
        json.dump(dataset.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_dataset(root) -> DomainDataset:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as fh:
            man = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("seed", "per_cell", "size", "domains", "classes"):
        if key not in man:
            raise FormatError(f"{path}: missing field {key!r}")
    size, per_cell = int(man["size"]), int(man["per_cell"])
    images = np.empty((len(man["domains"]), len(man["classes"]), per_cell, 3, size, size))
    for di, d in enumerate(man["domains"]):
        for ci, c in enumerate(man["classes"]):
            for k in range(per_cell):
                img = read_ppm(os.path.join(root, d, c, f"{k:05d}.ppm"))
                if img.shape != (3, size, size):
                    raise FormatError(f"{d}/{c}/{k:05d}.ppm has shape {list(img.shape)}, expected [3, {size}, {size}]")
                images[di, ci, k] = img
    return DomainDataset(images, tuple(man["domains"]), tuple(man["classes"]), int(man["seed"]), per_cell, size)
