"""Synthetic two-class image sets separable by mean intensity.

Infected images are bright, non-infected ones dark, each with mild pixel
noise so that no two images share content.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import CLASSES, INFECTED, ArrayData

BRIGHT = 0.75
DARK = 0.25
NOISE = 0.05


def separable_arrays(n: int, size: int = 32, seed: int = 0) -> ArrayData:
    """``n`` images alternating infected/not infected."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2 == 0
    base = np.where(labels, BRIGHT, DARK).astype(np.float32)[:, None, None, None]
    noise = rng.uniform(-NOISE, NOISE, size=(n, size, size, 1)).astype(np.float32)
    images = np.clip(np.repeat(base + noise, 3, axis=3), 0.0, 1.0)
    return ArrayData(images, labels.astype(np.float32), ids=[f"syn-{k:04d}" for k in range(n)])


def write_separable_dataset(root: str | Path, n_per_class: int, size: int = 32, seed: int = 0) -> Path:
    """Write grayscale PNGs in the ``<root>/{infected,notinfected}`` layout."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for label in CLASSES:
        d = root / label
        d.mkdir(parents=True, exist_ok=True)
        level = BRIGHT if label == INFECTED else DARK
        for k in range(n_per_class):
            px = level + rng.uniform(-NOISE, NOISE, size=(size, size))
            Image.fromarray(np.round(np.clip(px, 0, 1) * 255).astype(np.uint8), mode="L").save(d / f"{label}_{k:04d}.png")
    return root
