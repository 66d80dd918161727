"""Seeded synthetic two-class image sets written in the on-disk dataset layout.

Class 0 images carry horizontal stripes, class 1 vertical stripes. Stripe
period, phase, polarity, colour and noise are all randomized, so both
class-mean images are flat and no linear function of the pixels separates
the classes on held-out data; a small CNN learns it easily.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import CLASS_DIRS, write_ppm


def stripe_image(rng: np.random.Generator, label: int, extent: int, noise: float = 0.15) -> np.ndarray:
    period = rng.uniform(4.0, 10.0)
    phase = rng.uniform(0, 2 * np.pi)
    axis = np.arange(extent)
    wave = np.sin(2 * np.pi * axis / period + phase)
    pattern = np.tile(wave[:, None], (1, extent)) if label == 0 else np.tile(wave[None, :], (extent, 1))
    pattern *= rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
    tint = rng.uniform(0.3, 1.0, size=3)
    base = rng.uniform(0.3, 0.7)
    img = base + 0.3 * pattern[:, :, None] * tint[None, None, :]
    img += noise * rng.standard_normal(img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def brightness_image(rng: np.random.Generator, label: int, extent: int) -> np.ndarray:
    """Trivially separable: dark images for class 0, bright ones for class 1."""
    level = rng.uniform(0.05, 0.3) if label == 0 else rng.uniform(0.7, 0.95)
    img = level + 0.05 * rng.standard_normal((extent, extent, 3))
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


GENERATORS = {"stripes": stripe_image, "brightness": brightness_image}


def write_split(root, split: str, counts: tuple[int, int], extent: int, seed: int,
                kind: str = "stripes") -> list[Path]:
    """Write ``counts = (organic, recyclable)`` PPM images under ``root/split/{O,R}``."""
    generate = GENERATORS[kind]
    rng = np.random.default_rng([seed, sum(map(ord, split))])
    paths = []
    for label, (name, n) in enumerate(zip(CLASS_DIRS, counts)):
        class_dir = Path(root) / split / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            path = class_dir / f"{name.lower()}_{i:05d}.ppm"
            write_ppm(path, generate(rng, label, extent))
            paths.append(path)
    return paths


def write_dataset(root, train_counts, test_counts, extent: int = 64, seed: int = 0,
                  kind: str = "stripes") -> Path:
    root = Path(root)
    write_split(root, "TRAIN", tuple(train_counts), extent, seed, kind)
    write_split(root, "TEST", tuple(test_counts), extent, seed, kind)
    return root
