"""Procedural grayscale shape images, a download-free stand-in for digit data.

Each sample draws its own position, size, small rotation, contrast and
pixel noise from a stream keyed by the sample index, so a dataset is fully
determined by its config.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Dataset
from .tensor import Rng


def _disk(u, v):
    return u * u + v * v <= 1.0


def _square(u, v):
    return np.maximum(np.abs(u), np.abs(v)) <= 0.8


def _cross(u, v):
    return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))


def _ring(u, v):
    r2 = u * u + v * v
    return (r2 <= 1.0) & (r2 >= 0.36)


def _triangle(u, v):
    return (v <= 0.8) & (v >= -1.0 + 1.8 * np.abs(u))


def _diamond(u, v):
    return np.abs(u) + np.abs(v) <= 1.0


def _hbar(u, v):
    return (np.abs(v) <= 0.3) & (np.abs(u) <= 1.0)


def _vbar(u, v):
    return (np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)


def _xcross(u, v):
    arms = (np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4)
    return arms & (np.maximum(np.abs(u), np.abs(v)) <= 0.85)


def _frame(u, v):
    m = np.maximum(np.abs(u), np.abs(v))
    return (m <= 0.9) & (m >= 0.55)


SHAPES = {
    "disk": _disk,
    "square": _square,
    "cross": _cross,
    "ring": _ring,
    "triangle": _triangle,
    "diamond": _diamond,
    "hbar": _hbar,
    "vbar": _vbar,
    "xcross": _xcross,
    "frame": _frame,
}
SHAPE_NAMES = tuple(SHAPES)


@dataclass(frozen=True)
class SyntheticConfig:
    """``classes`` is a count (first n of :data:`SHAPE_NAMES`) or a tuple of names."""

    classes: int | tuple[str, ...] = 10
    n_per_class: int = 100
    size: int = 28
    seed: int = 0
    noise: float = 0.1
    scale: tuple[float, float] = (0.22, 0.38)
    max_rotation: float = 0.2  # radians
    supersample: int = 4

    @property
    def class_names(self) -> tuple[str, ...]:
        if isinstance(self.classes, int):
            if not 2 <= self.classes <= len(SHAPE_NAMES):
                raise ValueError(f"classes must be in [2, {len(SHAPE_NAMES)}], got {self.classes}")
            return SHAPE_NAMES[: self.classes]
        names = tuple(self.classes)
        unknown = [n for n in names if n not in SHAPES]
        if unknown or len(names) < 2 or len(set(names)) != len(names):
            raise ValueError(f"need >= 2 distinct shapes from {SHAPE_NAMES}, got {names}")
        return names


def render_shape(name: str, size: int, rng: Rng, cfg: SyntheticConfig) -> np.ndarray:
    """One ``(size, size)`` image in [0, 1]."""
    radius = rng.uniform(*cfg.scale) * size
    cy, cx = rng.uniform(radius, size - radius, 2)
    theta = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    fg = rng.uniform(0.6, 1.0)
    bg = rng.uniform(0.0, 0.2)
    ss = cfg.supersample
    grid = (np.arange(size * ss) + 0.5) / ss
    y, x = np.meshgrid(grid - cy, grid - cx, indexing="ij")
    c, s = np.cos(theta), np.sin(theta)
    u = (c * x + s * y) / radius
    v = (-s * x + c * y) / radius
    cover = SHAPES[name](u, v).astype(np.float64).reshape(size, ss, size, ss).mean(axis=(1, 3))
    img = bg + (fg - bg) * cover + rng.normal(0.0, cfg.noise, (size, size))
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Class-balanced shapes dataset of ``n_per_class`` images per class, shuffled by seed."""
    names = cfg.class_names
    k = len(names)
    n = k * cfg.n_per_class
    root = Rng(cfg.seed)
    labels = np.tile(np.arange(k), cfg.n_per_class)
    order = root.child(0).permutation(n)
    labels = labels[order]
    images = np.empty((n, 1, cfg.size, cfg.size))
    for i, label in enumerate(labels):
        images[i, 0] = render_shape(names[label], cfg.size, root.child(1, i), cfg)
    return Dataset(images, labels, k, names)
