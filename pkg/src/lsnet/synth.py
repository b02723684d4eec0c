"""Synthetic bitemporal pairs with exact change masks.

Both images share a smooth background and a set of shapes. The second image
gains and loses a few shapes (the semantic change recorded in the mask) and
both receive independent sensor noise plus a global brightness shift on the
second image (nuisance change that never enters the mask).

Noise budget: per-pixel noise is uniform in ±A/4 on each image and the
brightness shift is uniform in ±A/2, so |t1 - t2| <= A wherever the mask
is zero (A = ``noise_amplitude``).

Shapes are rasterised on a grid of ``cell`` x ``cell`` pixel blocks. With
the default of 2 every mask edge falls on the model's output-stride grid;
with ``cell=1`` edges can sit at any pixel, and no stride-2 score map can
then trace them exactly.
"""
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

# Binary-corner palette; background lives in [0.3, 0.7], so every shape
# differs from it by >= 0.22 per channel. Static shapes and changes use
# palettes that differ in the blue channel.
_LEVELS = (0.08, 0.92)
_STATIC = [(r, g, _LEVELS[0]) for r in _LEVELS for g in _LEVELS]
_CHANGE = [(r, g, _LEVELS[1]) for r in _LEVELS for g in _LEVELS]


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    image_size: int = 64
    shape_count: tuple = (2, 5)
    change_count: tuple = (1, 3)
    shape_size: tuple = (8, 20)
    noise_amplitude: float = 0.1
    mask_fraction: tuple = (0.02, 0.4)
    max_attempts: int = 64
    cell: int = 2

    def __post_init__(self):
        for name in ("shape_count", "change_count", "shape_size", "mask_fraction"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"SynthConfig.{name} must be an ordered non-negative range, got {(lo, hi)}")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.cell < 1 or self.image_size % self.cell:
            raise ValueError(f"cell must be a positive divisor of image_size, got {self.cell}")


def _smooth_background(rng, size):
    grid = rng.uniform(0.3, 0.7, size=(3, 5, 5))
    pos = np.linspace(0, 4, size)
    interp = np.stack([np.interp(pos, np.arange(5), np.eye(5)[i]) for i in range(5)], axis=1)
    return np.einsum("hi,cij,wj->chw", interp, grid, interp)


def _draw(rng, size, lo, hi, cell=1):
    """Random rectangle or ellipse as a boolean (size, size) mask, drawn on a ``cell`` grid."""
    if cell > 1:
        coarse = _draw(rng, size // cell, max(1, lo // cell), max(1, hi // cell))
        return np.kron(coarse, np.ones((cell, cell), dtype=bool)).astype(bool)
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    yy, xx = np.mgrid[0:size, 0:size]
    if rng.random() < 0.5:
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    cy, cx = top + (h - 1) / 2, left + (w - 1) / 2
    return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0


def _render(background, shapes):
    img = background.copy()
    for region, color in shapes:
        img[:, region] = np.asarray(color)[:, None]
    return img


def generate_synthetic_pair(cfg, index=0):
    """Deterministic (t1, t2, mask) for ``(cfg.seed, index)``; shapes (1,3,H,W), (1,3,H,W), (1,1,H,W)."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    lo, hi = cfg.shape_size
    background = _smooth_background(rng, size)
    n_static = int(rng.integers(cfg.shape_count[0], cfg.shape_count[1] + 1))
    static = [(_draw(rng, size, lo, hi, cfg.cell), _STATIC[int(rng.integers(len(_STATIC)))]) for _ in range(n_static)]
    clean1 = _render(background, static)
    n_change = int(rng.integers(cfg.change_count[0], cfg.change_count[1] + 1))

    clean2, mask = clean1, np.zeros((size, size), dtype=bool)
    if n_change:
        for _ in range(cfg.max_attempts):
            later = list(static)
            n_del = int(rng.integers(0, min(n_change, len(later)) + 1)) if later else 0
            for _ in range(n_del):
                later.pop(int(rng.integers(len(later))))
            for _ in range(n_change - n_del):
                later.append((_draw(rng, size, lo, hi, cfg.cell), _CHANGE[int(rng.integers(len(_CHANGE)))]))
            clean2 = _render(background, later)
            mask = np.any(clean1 != clean2, axis=0)
            if cfg.mask_fraction[0] <= mask.mean() <= cfg.mask_fraction[1]:
                break

    a = cfg.noise_amplitude
    if a > 0:
        t1 = clean1 + rng.uniform(-a / 4, a / 4, clean1.shape)
        t2 = clean2 + rng.uniform(-a / 4, a / 4, clean2.shape) + rng.uniform(-a / 2, a / 2)
    else:
        t1, t2 = clean1, clean2.copy()
    t1 = np.clip(t1, 0, 1)
    t2 = np.clip(t2, 0, 1)
    return (Tensor(t1[None].astype(np.float32)), Tensor(t2[None].astype(np.float32)),
            Tensor(mask[None, None].astype(np.float32)))


def synthetic_batch(cfg, indices):
    triples = [generate_synthetic_pair(cfg, i) for i in indices]
    return tuple(Tensor(np.concatenate([t[k].data for t in triples])) for k in range(3))


def write_synthetic_dataset(root, cfg, count, start=0, split=None):
    """Write ``count`` pairs in the A/B/OUT layout (PNG); returns the directory written."""
    from pathlib import Path

    from .data import write_gray, write_rgb

    base = Path(root) / split if split else Path(root)
    for sub in ("A", "B", "OUT"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    for i in range(start, start + count):
        t1, t2, mask = generate_synthetic_pair(cfg, i)
        name = f"{i:05d}.png"
        write_rgb(base / "A" / name, t1.data[0])
        write_rgb(base / "B" / name, t2.data[0])
        write_gray(base / "OUT" / name, mask.data[0, 0])
    return base
