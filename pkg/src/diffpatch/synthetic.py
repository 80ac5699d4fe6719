"""Synthetic scenes with objects the template detector is guaranteed to find."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detectors import TemplateDetector
from .geometry import BBox

__all__ = ["Scene", "make_corpus", "make_scene"]


@dataclass(frozen=True, eq=False)
class Scene:
    image_id: str
    image: np.ndarray
    bboxes: tuple[BBox, ...]
    classes: tuple[int, ...]


def make_scene(
    detector: TemplateDetector,
    n_objects: int,
    size: tuple[int, int] = (500, 500),
    *,
    seed: int = 0,
    contrast: float = 40.0,
    noise: float = 3.0,
    background: float = 127.0,
    image_id: str = "",
) -> Scene:
    """Gray noisy background with ``n_objects`` planted templates.

    Objects sit on window-aligned cells with at least one free window between
    neighbours, so each one is matched by exactly one proposal. Pixel values
    are integral, as if read from an 8-bit file.
    """
    rng = np.random.default_rng(seed)
    height, width = size
    win, stride = detector.window, detector.stride
    image = background + noise * rng.standard_normal((height, width, 3))

    # candidate cells on a coarse lattice keep objects separated by >= one window
    pitch = 2 * win + (-2 * win) % stride
    rows = np.arange(0, height - win + 1, pitch)
    cols = np.arange(0, width - win + 1, pitch)
    cells = [(int(r), int(c)) for r in rows for c in cols]
    if n_objects > len(cells):
        raise ValueError(f"{n_objects} objects do not fit in a {height}x{width} scene")
    picks = rng.choice(len(cells), size=n_objects, replace=False)
    templates = detector.templates
    unit = np.sqrt(templates[0].size)
    boxes, classes = [], []
    for idx in sorted(int(p) for p in picks):
        r, c = cells[idx]
        cls = int(rng.integers(detector.class_count))
        image[r : r + win, c : c + win] += contrast * unit * templates[cls]
        boxes.append(BBox(x=c, y=r, w=win, h=win))
        classes.append(cls)
    image = np.clip(np.rint(image), 0, 255)
    return Scene(image_id=image_id, image=image, bboxes=tuple(boxes), classes=tuple(classes))


def make_corpus(
    detector: TemplateDetector,
    count: int,
    *,
    size: tuple[int, int] = (500, 500),
    objects: tuple[int, int] = (1, 8),
    seed: int = 0,
) -> list[Scene]:
    """``count`` scenes with an object count drawn uniformly from ``objects``."""
    rng = np.random.default_rng(seed)
    scenes = []
    for k in range(count):
        n = int(rng.integers(objects[0], objects[1] + 1))
        scenes.append(make_scene(detector, n, size, seed=int(rng.integers(2**31)), image_id=f"scene-{k:04d}"))
    return scenes
