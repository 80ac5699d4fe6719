"""Gradient heatmaps of the attacking loss over the composed image."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .attack import AttackConfig, HingeLoss, compose, run_attack
from .detectors import DetectorAdapter
from .geometry import BBox, PatchMask
from .io import save_image, write_json

__all__ = ["HeatmapArtifact", "compute_heatmap", "emit_heatmap", "emit_heatmap_series", "mass_inside"]

logger = logging.getLogger(__name__)

COLORMAP = "viridis"
OPACITY = 0.5


@dataclass(frozen=True, eq=False)
class HeatmapArtifact:
    grid: np.ndarray
    normalized: np.ndarray
    overlay: np.ndarray
    flat: bool

    def to_uint16(self) -> np.ndarray:
        return np.rint(self.normalized * 65535).astype(np.uint16)


def _colorize(normalized: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return colormaps[COLORMAP](normalized)[..., :3] * 255.0


def compute_heatmap(
    detector: DetectorAdapter,
    image: np.ndarray,
    mask: PatchMask | np.ndarray,
    delta: np.ndarray,
    t: float,
) -> HeatmapArtifact:
    """Per-pixel L1 norm (over channels) of the hinge-loss gradient.

    The gradient is taken at ``image * (1 - M) + delta * M`` and the overlay
    blends the colorized, min-max normalized grid over ``image``.
    """
    image = np.asarray(image, dtype=np.float64)
    composed = compose(image, mask, delta)
    grad = detector.loss_gradient(composed, HingeLoss(t))
    grid = np.abs(grad).sum(axis=2)
    lo, hi = float(grid.min()), float(grid.max())
    flat = hi <= lo
    if flat:
        logger.warning("gradient heatmap is flat (range %g..%g); writing an all-zero map", lo, hi)
        normalized = np.zeros_like(grid)
    else:
        normalized = (grid - lo) / (hi - lo)
    overlay = (1.0 - OPACITY) * image + OPACITY * _colorize(normalized)
    overlay = np.clip(np.rint(overlay), 0, 255)
    return HeatmapArtifact(grid=grid, normalized=normalized, overlay=overlay, flat=flat)


def emit_heatmap(
    detector: DetectorAdapter,
    image: np.ndarray,
    mask: PatchMask | np.ndarray,
    delta: np.ndarray,
    t: float,
    iteration_tag,
    out_dir: str | os.PathLike,
) -> HeatmapArtifact:
    """Write ``heatmap-<tag>.png`` (16-bit), ``overlay-<tag>.png`` and ``heatmap-<tag>.json``."""
    art = compute_heatmap(detector, image, mask, delta, t)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(art.to_uint16()).save(out_dir / f"heatmap-{iteration_tag}.png", format="PNG")
    save_image(out_dir / f"overlay-{iteration_tag}.png", art.overlay)
    write_json(
        out_dir / f"heatmap-{iteration_tag}.json",
        {
            "tag": str(iteration_tag),
            "grid_min": float(art.grid.min()),
            "grid_max": float(art.grid.max()),
            "total_l1": float(art.grid.sum()),
            "flat": art.flat,
            "colormap": COLORMAP,
            "opacity": OPACITY,
        },
    )
    return art


def emit_heatmap_series(
    detector: DetectorAdapter,
    image: np.ndarray,
    bboxes: Sequence[BBox],
    config: AttackConfig,
    iterations: Iterable[int],
    out_dir: str | os.PathLike,
) -> dict[int, HeatmapArtifact]:
    """Run one attack and write a heatmap at each requested iteration.

    A tag beyond the last pass of an early-stopped attack uses the final
    patch values.
    """
    tags = sorted(set(int(i) for i in iterations))
    snapshots: dict[int, np.ndarray] = {}

    def record(i, delta):
        if i in tags:
            snapshots[i] = delta
        snapshots["last"] = delta

    result = run_attack(detector, image, bboxes, config, callback=record)
    out = {}
    for tag in tags:
        delta = snapshots.get(tag, snapshots["last"])
        out[tag] = emit_heatmap(detector, image, result.final_mask, delta, config.score_threshold, tag, out_dir)
    return out


def mass_inside(grid: np.ndarray, bboxes: Sequence[BBox]) -> float:
    """Fraction of the heatmap's total mass that falls inside the boxes."""
    total = float(grid.sum())
    if total == 0:
        return 0.0
    inside = np.zeros(grid.shape, dtype=bool)
    for b in bboxes:
        inside[max(b.y, 0) : b.y + b.h, max(b.x, 0) : b.x + b.w] = True
    return float(grid[inside].sum()) / total
