"""Procedural toy scenes with exact classification and segmentation labels.

Each scene is a few coloured shapes drawn over a smooth textured background.
The classification label is the type of the shape covering the most pixels;
the segmentation mask labels each pixel with the colour family of the shape
on top of it (0 is background).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
COLOR_FAMILIES = ("red", "green", "blue")
NUM_CLASSES = len(SHAPES)
NUM_SEG_CLASSES = len(COLOR_FAMILIES) + 1

_BASE_COLORS = np.array(
    [[0.85, 0.15, 0.15], [0.15, 0.75, 0.2], [0.2, 0.3, 0.9]], dtype=np.float64
)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    class_id: int
    mask: np.ndarray  # (H, W) uint8


def _shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        h = r * 0.85
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    if kind == "triangle":
        # upward isoceles triangle inscribed in the bounding box
        top, bottom = cy - r, cy + r
        inside_y = (yy >= top) & (yy <= bottom)
        half_width = (yy - top) / (2 * r) * r
        return inside_y & (np.abs(dx) <= half_width)
    if kind == "cross":
        arm = r * 0.35
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ValueError(kind)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = rng.uniform(0.35, 0.65, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(2, 3))
    img = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]
    freq = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = np.sin(2 * np.pi * freq[0] * xx + phase[0]) * np.sin(2 * np.pi * freq[1] * yy + phase[1])
    img = img + 0.05 * texture[..., None]
    return img


def generate_scene(rng: np.random.Generator, size: int = 64) -> Scene:
    img = _background(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    owner = np.full((size, size), -1, dtype=np.int64)

    n_shapes = int(rng.integers(1, 4))
    # one clearly dominant shape, then smaller distractors drawn on top
    radii = np.concatenate(
        [rng.uniform(size * 0.22, size * 0.32, size=1), np.sort(rng.uniform(size * 0.08, size * 0.14, size=n_shapes - 1))[::-1]]
    )
    kinds = rng.integers(0, NUM_CLASSES, size=n_shapes)
    for idx, (r, k) in enumerate(zip(radii, kinds)):
        cy, cx = rng.uniform(r * 0.6, size - r * 0.6, size=2)
        m = _shape_mask(SHAPES[k], cy, cx, r, size)
        family = int(rng.integers(0, len(COLOR_FAMILIES)))
        color = np.clip(_BASE_COLORS[family] + rng.uniform(-0.1, 0.1, size=3), 0, 1)
        img[m] = color
        mask[m] = family + 1
        owner[m] = idx

    areas = np.array([(owner == i).sum() for i in range(n_shapes)])
    class_id = int(kinds[int(np.argmax(areas))])
    return Scene(image=np.clip(img, 0.0, 1.0), class_id=class_id, mask=mask)


def generate_scenes(n: int, seed: int, size: int = 64) -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [generate_scene(rng, size) for _ in range(n)]
