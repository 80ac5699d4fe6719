"""Detector contract and a differentiable template-matching reference detector.

An adapter exposes three things to the attack:

``propose(image)``
    every candidate proposal with raw class scores (no thresholding, no NMS);
``detect(image, score_threshold)``
    the final post-processed boxes, used to count objects;
``loss_gradient(image, loss)``
    the exact gradient of ``loss(propose(image).scores)`` w.r.t. each pixel.

A loss is any object with ``value(scores) -> float`` and
``grad(scores) -> ndarray`` of the same shape as ``scores``.
"""
from __future__ import annotations

import abc
import importlib
import json
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .geometry import BBox

__all__ = [
    "DetectorAdapter",
    "ImageTooSmallError",
    "NonDifferentiableLossError",
    "Proposal",
    "ProposalSet",
    "TemplateDetector",
    "available_detectors",
    "box_iou",
    "detector_from_config",
    "get_detector",
    "load_registry_file",
    "nms",
    "register_detector",
]

REGISTRY_ENV = "DIFFPATCH_DETECTOR_REGISTRY"


class ImageTooSmallError(ValueError):
    pass


class NonDifferentiableLossError(TypeError):
    pass


@dataclass(frozen=True)
class Proposal:
    bbox: BBox
    scores: np.ndarray


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """``N`` proposals stored column-wise.

    ``boxes`` is an ``(N, 4)`` integer array of ``x, y, w, h`` rows and
    ``scores`` an ``(N, C)`` array of class scores in ``[0, 1]``.
    """

    boxes: np.ndarray
    scores: np.ndarray
    source: str = ""

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.int64).reshape(-1, 4)
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            scores = scores.reshape(len(boxes), -1)
        if len(boxes) != len(scores):
            raise ValueError(f"{len(boxes)} boxes but {len(scores)} score rows")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return len(self.boxes)

    @property
    def class_count(self) -> int:
        return self.scores.shape[1]

    @property
    def proposals(self) -> list[Proposal]:
        return [Proposal(BBox(*map(int, b)), s) for b, s in zip(self.boxes, self.scores)]

    @classmethod
    def from_scores(cls, scores, boxes=None, source: str = "") -> "ProposalSet":
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        if scores.size == 0:
            scores = scores.reshape(0, max(scores.shape[-1], 1))
        if boxes is None:
            boxes = np.tile(np.array([0, 0, 1, 1]), (len(scores), 1))
        return cls(boxes=boxes, scores=scores, source=source)


def box_iou(a: Sequence[int], b: np.ndarray) -> np.ndarray:
    """IoU of one ``x, y, w, h`` box against an ``(M, 4)`` array."""
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0, aw, ah = (float(v) for v in a)
    ix = np.clip(np.minimum(ax0 + aw, b[:, 0] + b[:, 2]) - np.maximum(ax0, b[:, 0]), 0, None)
    iy = np.clip(np.minimum(ay0 + ah, b[:, 1] + b[:, 3]) - np.maximum(ay0, b[:, 1]), 0, None)
    inter = ix * iy
    union = aw * ah + b[:, 2] * b[:, 3] - inter
    return inter / union


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices, best first.

    Ties in score keep the lower index first (stable sort).
    """
    boxes = np.asarray(boxes).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep: list[int] = []
    while order.size:
        best = int(order[0])
        keep.append(best)
        rest = order[1:]
        if rest.size == 0:
            break
        order = rest[box_iou(boxes[best], boxes[rest]) <= iou_threshold]
    return keep


def _require_differentiable(loss):
    if not (callable(getattr(loss, "value", None)) and callable(getattr(loss, "grad", None))):
        raise NonDifferentiableLossError(
            f"{type(loss).__name__} does not provide value(scores) and grad(scores)"
        )


class DetectorAdapter(abc.ABC):
    """Base class for anything the attack can be run against.

    Subclasses that hold mutable state (for example a GPU session) should set
    ``concurrent_safe = False`` so the campaign runner evaluates them from one
    worker only.
    """

    name: str = "detector"
    concurrent_safe: bool = True
    iou_threshold: float = 0.5

    @property
    @abc.abstractmethod
    def class_count(self) -> int: ...

    @abc.abstractmethod
    def propose(self, image: np.ndarray) -> ProposalSet: ...

    @abc.abstractmethod
    def loss_gradient(self, image: np.ndarray, loss) -> np.ndarray: ...

    def detect(self, image: np.ndarray, score_threshold: float) -> list[BBox]:
        if not 0.0 < score_threshold < 1.0:
            raise ValueError(f"score_threshold must lie in (0, 1), got {score_threshold}")
        props = self.propose(image)
        if len(props) == 0:
            return []
        best = props.scores.max(axis=1)
        candidates = np.flatnonzero(best > score_threshold)
        if candidates.size == 0:
            return []
        kept = nms(props.boxes[candidates], best[candidates], self.iou_threshold)
        return [BBox(*map(int, props.boxes[candidates[k]])) for k in kept]


class TemplateDetector(DetectorAdapter):
    """Sliding-window normalized cross-correlation against fixed templates.

    Each stride-aligned ``window x window`` crop is one proposal. Its class-c
    score is ``expit(beta * ncc_c - gamma)``, where ``ncc_c`` is the
    normalized cross-correlation between the crop and template ``c``.

    :param templates: ``(C, window, window, 3)`` patterns. They are stored
        zero-mean and unit-norm. If omitted, ``class_count`` random patterns
        are drawn from ``seed``.
    """

    name = "template"

    def __init__(
        self,
        templates: np.ndarray | None = None,
        *,
        class_count: int = 3,
        window: int = 16,
        stride: int = 8,
        beta: float = 10.0,
        gamma: float = 5.0,
        seed: int = 0,
        eps: float = 1e-8,
    ):
        if templates is None:
            rng = np.random.default_rng(seed)
            templates = rng.standard_normal((class_count, window, window, 3))
        templates = np.asarray(templates, dtype=np.float64)
        if templates.ndim != 4 or templates.shape[1:] != (window, window, 3):
            raise ValueError(f"templates must have shape (C, {window}, {window}, 3), got {templates.shape}")
        flat = templates.reshape(len(templates), -1)
        flat = flat - flat.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("templates must not be constant")
        self._flat = flat / norms
        self.window = int(window)
        self.stride = int(stride)
        self.beta = float(beta)
        self.gamma = float(gamma)
        self.eps = float(eps)

    @property
    def templates(self) -> np.ndarray:
        return self._flat.reshape(-1, self.window, self.window, 3)

    @property
    def class_count(self) -> int:
        return len(self._flat)

    @classmethod
    def from_weights(cls, path: str | os.PathLike, **kwargs) -> "TemplateDetector":
        with np.load(path) as data:
            return cls(templates=data["templates"], **kwargs)

    def save_weights(self, path: str | os.PathLike) -> None:
        np.savez(path, templates=self.templates)

    def grid_shape(self, image_size: tuple[int, int]) -> tuple[int, int]:
        height, width = image_size
        if height < self.window or width < self.window:
            raise ImageTooSmallError(
                f"image {height}x{width} is smaller than the {self.window}x{self.window} window"
            )
        return (height - self.window) // self.stride + 1, (width - self.window) // self.stride + 1

    def _check_image(self, image) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
        return image

    def _boxes(self, ny: int, nx: int) -> np.ndarray:
        rows, cols = np.divmod(np.arange(ny * nx), nx)
        side = np.full_like(rows, self.window)
        return np.stack([cols * self.stride, rows * self.stride, side, side], axis=1)

    def _window_sums(self, image: np.ndarray, ny: int, nx: int):
        """Per-window template dot products, pixel sums and squared sums."""
        win, stride, C = self.window, self.stride, self.class_count
        # NCC ignores constant offsets; centring on mid-gray limits cancellation
        image = image - 127.5
        if win % stride:
            views = sliding_window_view(image, (win, win, 3))[: ny * stride : stride, : nx * stride : stride, 0]
            crops = views.reshape(ny, nx, -1)
            return crops @ self._flat.T, crops.sum(-1), np.einsum("ijk,ijk->ij", crops, crops)
        # A window is a k x k block of stride-sized cells; sum cell-level terms.
        k = win // stride
        cy, cx = ny - 1 + k, nx - 1 + k
        cells = image[: cy * stride, : cx * stride].reshape(cy, stride, cx, stride, 3)
        cells = cells.transpose(0, 2, 1, 3, 4).reshape(cy, cx, -1)
        parts = self._flat.reshape(C, k, stride, k, stride, 3).transpose(1, 3, 0, 2, 4, 5).reshape(k, k, C, -1)
        cell_sum = cells.sum(-1)
        cell_sq = np.einsum("ijk,ijk->ij", cells, cells)
        dots = np.zeros((ny, nx, C))
        total = np.zeros((ny, nx))
        squares = np.zeros((ny, nx))
        for a in range(k):
            for b in range(k):
                dots += cells[a : a + ny, b : b + nx] @ parts[a, b].T
                total += cell_sum[a : a + ny, b : b + nx]
                squares += cell_sq[a : a + ny, b : b + nx]
        return dots, total, squares

    def correlations(self, image: np.ndarray) -> np.ndarray:
        """``(N, C)`` normalized cross-correlations, proposals in raster order."""
        image = self._check_image(image)
        ny, nx = self.grid_shape(image.shape[:2])
        dots, total, squares = self._window_sums(image, ny, nx)
        size = self._flat.shape[1]
        variance = squares - total**2 / size
        # Below this the difference is round-off: the window is constant.
        flat = variance <= 1e-10 * (squares + 1.0)
        norms = np.sqrt(np.where(flat, 0.0, variance))
        corr = np.where(flat[..., None], 0.0, dots / (norms + self.eps)[..., None])
        return corr.reshape(ny * nx, -1)

    def propose(self, image: np.ndarray) -> ProposalSet:
        corr = self.correlations(image)
        ny, nx = self.grid_shape(np.shape(image)[:2])
        scores = expit(self.beta * corr - self.gamma)
        return ProposalSet(boxes=self._boxes(ny, nx), scores=scores, source=self.name)

    def loss_gradient(self, image: np.ndarray, loss) -> np.ndarray:
        _require_differentiable(loss)
        image = self._check_image(image)
        props = self.propose(image)
        d_scores = np.asarray(loss.grad(props.scores), dtype=np.float64)
        if d_scores.shape != props.scores.shape:
            raise ValueError(f"loss gradient has shape {d_scores.shape}, expected {props.scores.shape}")
        grad = np.zeros(image.shape, dtype=np.float64)
        active = np.flatnonzero(np.any(d_scores != 0.0, axis=1))
        if active.size == 0:
            return grad
        win = self.window
        boxes = props.boxes[active]
        crops = np.stack([image[y : y + win, x : x + win].reshape(-1) for x, y, _, _ in boxes])
        centred = crops - crops.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(centred, axis=1)
        denom = norms + self.eps
        corr = (centred @ self._flat.T) / denom[:, None]
        s = expit(self.beta * corr - self.gamma)
        g = d_scores[active] * s * (1.0 - s) * self.beta
        # d ncc / d crop = T / (n + eps) - ncc * u / (n (n + eps)); the mean
        # subtraction drops out because both terms are already zero-mean.
        safe_n = np.where(norms > 0, norms, 1.0)
        weight = np.where(norms > 0, np.sum(g * corr, axis=1) / (safe_n * denom), 0.0)
        d_crops = (g @ self._flat) / denom[:, None] - weight[:, None] * centred
        for (x, y, w, h), block in zip(boxes, d_crops.reshape(-1, win, win, 3)):
            grad[y : y + h, x : x + w] += block
        return grad


_REGISTRY: dict[str, Callable[..., DetectorAdapter]] = {}


def register_detector(name: str, factory: Callable[..., DetectorAdapter]) -> None:
    _REGISTRY[name] = factory


def _template_factory(weights: str | None = None, **kwargs) -> TemplateDetector:
    if weights:
        return TemplateDetector.from_weights(weights, **kwargs)
    return TemplateDetector(**kwargs)


register_detector("template", _template_factory)


def load_registry_file(path: str | os.PathLike) -> None:
    """Register factories from a JSON file mapping names to ``module:attr``."""
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    for name, target in entries.items():
        module_name, _, attr = target.partition(":")
        register_detector(name, getattr(importlib.import_module(module_name), attr))


def available_detectors() -> list[str]:
    return sorted(_REGISTRY)


def get_detector(name: str, **kwargs) -> DetectorAdapter:
    if name not in _REGISTRY and os.environ.get(REGISTRY_ENV):
        load_registry_file(os.environ[REGISTRY_ENV])
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown detector {name!r}; known: {', '.join(available_detectors())}") from None
    return factory(**kwargs)


def detector_from_config(section: dict) -> tuple[DetectorAdapter, float]:
    """Build a detector from a ``{"name", "weights", "score_threshold", ...}`` section.

    Returns the detector and the score threshold used to count its boxes.
    """
    section = dict(section)
    name = section.pop("name", "template")
    threshold = float(section.pop("score_threshold", 0.3))
    weights = section.pop("weights", None)
    if weights is not None:
        section["weights"] = weights
    return get_detector(name, **section), threshold
