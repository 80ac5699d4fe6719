"""Hinge attacking loss and the iterative masked sign-gradient patch attack."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .detectors import DetectorAdapter, ProposalSet
from .geometry import BBox, Budget, PatchMask, PatchShapeSpec, shrink_to_budget

__all__ = [
    "AttackConfig",
    "AttackResult",
    "HingeLoss",
    "attack_loss",
    "compose",
    "count_positive",
    "quantize_and_verify",
    "run_attack",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    max_iterations: int = 200
    score_threshold: float = 0.3
    step: float = 2.0
    shape: PatchShapeSpec = field(default_factory=lambda: PatchShapeSpec(kind="grid", lines=3))
    budget: Budget = field(default_factory=Budget)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must lie in (0, 1)")
        if not 0.0 < self.step <= 255.0:
            raise ValueError("step must lie in (0, 255]")

    @property
    def name(self) -> str:
        return self.shape.name

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "score_threshold": self.score_threshold,
            "step": self.step,
            "shape": self.shape.to_dict(),
            "budget": self.budget.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        data = dict(data)
        if "shape" in data:
            data["shape"] = PatchShapeSpec.from_dict(data["shape"])
        if "budget" in data:
            data["budget"] = Budget(**data["budget"])
        return cls(**data)


@dataclass(frozen=True, eq=False)
class AttackResult:
    adversarial: np.ndarray
    delta: np.ndarray
    iterations_used: int
    positive_counts: list[int]
    loss_trace: list[float]
    final_mask: PatchMask
    success: bool
    config: AttackConfig
    quantized: bool = False

    def summary(self) -> dict:
        return {
            "iterations_used": self.iterations_used,
            "success": self.success,
            "quantized": self.quantized,
            "loss_trace": list(self.loss_trace),
            "positive_counts": list(self.positive_counts),
            "spec": self.final_mask.spec.to_dict() if self.final_mask.spec else None,
            "config": self.config.to_dict(),
        }


class HingeLoss:
    """Sum over proposals and classes of ``max(0, score - threshold)``.

    The subgradient at ``score == threshold`` is taken as 0.
    """

    def __init__(self, threshold: float):
        self.threshold = float(threshold)

    def value(self, scores: np.ndarray) -> float:
        scores = np.asarray(scores, dtype=np.float64)
        return float(np.maximum(scores - self.threshold, 0.0).sum())

    def grad(self, scores: np.ndarray) -> np.ndarray:
        return (np.asarray(scores) > self.threshold).astype(np.float64)


def _mask_array(mask) -> np.ndarray:
    return mask.mask if isinstance(mask, PatchMask) else np.asarray(mask, dtype=bool)


def compose(image: np.ndarray, mask, delta: np.ndarray) -> np.ndarray:
    """``image * (1 - M) + delta * M`` with ``M`` broadcast over channels."""
    image = np.asarray(image)
    delta = np.asarray(delta)
    m = _mask_array(mask)
    if image.shape != delta.shape or image.shape[:2] != m.shape:
        raise ValueError(f"shape mismatch: image {image.shape}, mask {m.shape}, delta {delta.shape}")
    return np.where(m[..., None], delta, image).astype(np.float64)


def attack_loss(proposals: ProposalSet, t: float) -> float:
    return HingeLoss(t).value(proposals.scores)


def count_positive(proposals: ProposalSet, t: float) -> int:
    """Number of proposals whose best class score is strictly above ``t``."""
    if len(proposals) == 0:
        return 0
    return int(np.count_nonzero(proposals.scores.max(axis=1) > t))


def run_attack(
    detector: DetectorAdapter,
    image: np.ndarray,
    bboxes: Sequence[BBox],
    config: AttackConfig,
    *,
    mask: PatchMask | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> AttackResult:
    """Optimize patch values under a fixed mask until no proposal is positive.

    The mask is built from ``bboxes`` with :func:`shrink_to_budget` unless one
    is passed in. ``delta`` starts at zero. Each pass evaluates the hinge
    loss on the composed image, steps ``delta`` against the sign of the
    masked gradient, clamps it to ``[0, 255]`` and recounts positives. If no
    proposal is positive on entry the loop is skipped.

    ``callback(i, delta)`` is called with the patch values before pass ``i``
    and once more after the last pass.
    """
    image = np.asarray(image, dtype=np.float64)
    if mask is None:
        mask, _ = shrink_to_budget(bboxes, config.shape, config.budget, image.shape[:2])
    m = mask.mask[..., None]
    t = config.score_threshold
    loss = HingeLoss(t)
    delta = np.zeros_like(image)

    props = detector.propose(compose(image, mask, delta))
    n = count_positive(props, t)
    loss_trace: list[float] = []
    positive_counts: list[int] = []
    i = 0
    while i < config.max_iterations and n > 0:
        if callback is not None:
            callback(i, delta.copy())
        loss_trace.append(loss.value(props.scores))
        grad = detector.loss_gradient(compose(image, mask, delta), loss)
        delta = delta - config.step * np.sign(np.where(m, grad, 0.0))
        delta = np.clip(delta, 0.0, 255.0)
        props = detector.propose(compose(image, mask, delta))
        n = count_positive(props, t)
        positive_counts.append(n)
        i += 1
    if callback is not None:
        callback(i, delta.copy())
    logger.debug("%s: %d iterations, %d positives left", config.name, i, n)
    return AttackResult(
        adversarial=compose(image, mask, delta),
        delta=delta,
        iterations_used=i,
        positive_counts=positive_counts,
        loss_trace=loss_trace,
        final_mask=mask,
        success=n == 0,
        config=config,
    )


def quantize_and_verify(result: AttackResult, detector: DetectorAdapter, config: AttackConfig | None = None) -> AttackResult:
    """Round the adversarial image to 8-bit values and re-check success there."""
    config = config or result.config
    quantized = np.clip(np.rint(result.adversarial), 0, 255)
    if np.array_equal(quantized, result.adversarial):
        return replace(result, quantized=True)
    n = count_positive(detector.propose(quantized), config.score_threshold)
    if result.success and n > 0:
        logger.info("%s: success lost after 8-bit rounding (%d positives)", config.name, n)
    return replace(result, adversarial=quantized, success=n == 0, quantized=True)
