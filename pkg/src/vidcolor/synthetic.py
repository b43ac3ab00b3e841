"""Procedural colorful test images (no downloads needed for tests and demos)."""

from __future__ import annotations

import numpy as np

from .colorio import LabFrame, rgb_to_lab


def procedural_rgb(seed: int, size=(144, 256), n_cells: int = 12) -> np.ndarray:
    """Voronoi mosaic of saturated colors with a soft shading gradient, float RGB in [0, 1]."""
    rng = np.random.default_rng(seed)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    centers = rng.uniform([0, 0], [h, w], size=(n_cells, 2))
    d = (ys[..., None] - centers[:, 0]) ** 2 + (xs[..., None] - centers[:, 1]) ** 2
    label = d.argmin(-1)
    palette = rng.uniform(0.05, 0.95, size=(n_cells, 3))
    # push colors away from gray so chrominance is substantial
    palette = np.clip(0.5 + 1.6 * (palette - palette.mean(1, keepdims=True)) + 0.4 * (palette.mean(1, keepdims=True) - 0.5), 0, 1)
    img = palette[label]
    shade = 0.85 + 0.15 * np.sin(xs / w * np.pi * rng.uniform(1, 3) + rng.uniform(0, 6))[..., None]
    return np.clip(img * shade, 0, 1)


def procedural_frame(seed: int, size=(144, 256), n_cells: int = 12) -> LabFrame:
    return rgb_to_lab(procedural_rgb(seed, size, n_cells))
