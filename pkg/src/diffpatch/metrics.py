"""Competition scoring: overall score, success rate, box ratio and pixel fraction."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .detectors import DetectorAdapter
from .geometry import PatchMask

__all__ = [
    "CANONICAL_PIXEL_LIMIT",
    "CANONICAL_SIZE",
    "CorpusReport",
    "ImageEvaluation",
    "UndefinedScoreError",
    "corpus_metrics",
    "evaluate_image",
    "make_evaluation",
    "overall_score",
    "REPORT_SCHEMA_VERSION",
]

CANONICAL_SIZE = (500, 500)
CANONICAL_PIXEL_LIMIT = 5000
REPORT_SCHEMA_VERSION = 1


class UndefinedScoreError(ZeroDivisionError):
    pass


def overall_score(bb_orig: int, bb_adv: int, pixel_counts: Sequence[int], pixel_limit: float = CANONICAL_PIXEL_LIMIT) -> float:
    """``(2 - sum(R) / limit) * (1 - min(bb_orig, bb_adv) / bb_orig)``.

    ``pixel_limit`` is 5000 for 500 x 500 competition images.
    """
    if bb_orig <= 0:
        raise UndefinedScoreError("overall score is undefined for an image without detections")
    perturbed = float(sum(pixel_counts))
    return (2.0 - perturbed / pixel_limit) * (1.0 - min(bb_orig, bb_adv) / bb_orig)


@dataclass(frozen=True)
class ImageEvaluation:
    bb_orig: int
    bb_adv: int
    pixel_counts: tuple[int, ...]
    os: float
    success: bool
    image_id: str = ""
    image_size: tuple[int, int] = CANONICAL_SIZE
    excluded: bool = False
    nonstandard_size: bool = False
    config_id: str | None = None

    @property
    def perturbed_pixels(self) -> int:
        return int(sum(self.pixel_counts))

    @property
    def num_patches(self) -> int:
        return len(self.pixel_counts)

    @property
    def pixel_fraction(self) -> float:
        height, width = self.image_size
        return self.perturbed_pixels / (height * width)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pixel_counts"] = list(self.pixel_counts)
        out["image_size"] = list(self.image_size)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ImageEvaluation":
        data = dict(data)
        data["pixel_counts"] = tuple(data["pixel_counts"])
        data["image_size"] = tuple(data["image_size"])
        return cls(**data)


def _pixel_limit(image_size: tuple[int, int]) -> float:
    if tuple(image_size) == CANONICAL_SIZE:
        return CANONICAL_PIXEL_LIMIT
    return 0.02 * image_size[0] * image_size[1]


def make_evaluation(
    bb_orig: int,
    bb_adv: int,
    pixel_counts: Sequence[int],
    image_size: tuple[int, int] = CANONICAL_SIZE,
    image_id: str = "",
    config_id: str | None = None,
) -> ImageEvaluation:
    image_size = (int(image_size[0]), int(image_size[1]))
    counts = tuple(int(c) for c in pixel_counts)
    if bb_orig == 0:
        score, success, excluded = 0.0, False, True
    else:
        score = overall_score(bb_orig, bb_adv, counts, _pixel_limit(image_size))
        success, excluded = bb_adv == 0, False
    return ImageEvaluation(
        bb_orig=int(bb_orig),
        bb_adv=int(bb_adv),
        pixel_counts=counts,
        os=score,
        success=success,
        image_id=image_id,
        image_size=image_size,
        excluded=excluded,
        nonstandard_size=image_size != CANONICAL_SIZE,
        config_id=config_id,
    )


def evaluate_image(
    detector: DetectorAdapter,
    original: np.ndarray,
    adversarial: np.ndarray,
    mask: PatchMask,
    score_threshold: float,
    *,
    image_id: str = "",
    config_id: str | None = None,
) -> ImageEvaluation:
    """Count boxes before and after the attack and score the image.

    Images where the detector finds nothing on the original are returned
    with ``excluded=True`` and ``os=0`` instead of raising.
    """
    if np.shape(original) != np.shape(adversarial):
        raise ValueError(f"shape mismatch: {np.shape(original)} vs {np.shape(adversarial)}")
    bb_orig = len(detector.detect(original, score_threshold))
    bb_adv = len(detector.detect(adversarial, score_threshold))
    return make_evaluation(bb_orig, bb_adv, mask.per_component_counts, np.shape(original)[:2], image_id, config_id)


@dataclass(frozen=True)
class CorpusReport:
    per_image: tuple[ImageEvaluation, ...]
    sr: float
    os_total: float
    bbr: float
    app: float
    failures: tuple[dict, ...] = field(default=())

    @property
    def scored_images(self) -> int:
        return sum(1 for e in self.per_image if not e.excluded)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "summary": {
                "images": len(self.per_image),
                "scored_images": self.scored_images,
                "excluded_images": len(self.per_image) - self.scored_images,
                "nonstandard_size_images": sum(1 for e in self.per_image if e.nonstandard_size),
                "failed_images": len(self.failures),
                "sr": self.sr,
                "os_total": self.os_total,
                "bbr": self.bbr,
                "app": self.app,
            },
            "per_image": [e.to_dict() for e in self.per_image],
            "failures": [dict(f) for f in self.failures],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "bb_orig", "bb_adv", "sum_r", "num_patches", "os", "success"])
        for e in self.per_image:
            writer.writerow([e.image_id, e.bb_orig, e.bb_adv, e.perturbed_pixels, e.num_patches, repr(e.os), int(e.success)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusReport":
        summary = data["summary"]
        return cls(
            per_image=tuple(ImageEvaluation.from_dict(e) for e in data["per_image"]),
            sr=summary["sr"],
            os_total=summary["os_total"],
            bbr=summary["bbr"],
            app=summary["app"],
            failures=tuple(data.get("failures", ())),
        )


def corpus_metrics(evaluations: Sequence[ImageEvaluation], failures: Sequence[dict] = ()) -> CorpusReport:
    """Aggregate per-image evaluations.

    SR and the OS sum skip excluded images; BBR is the ratio of box totals and
    APP the mean per-image perturbed fraction.
    """
    evaluations = tuple(evaluations)
    if not evaluations:
        raise ValueError("cannot aggregate an empty list of evaluations")
    total_orig = sum(e.bb_orig for e in evaluations)
    if total_orig == 0:
        raise UndefinedScoreError("box ratio is undefined: no detections on any original image")
    scored = [e for e in evaluations if not e.excluded]
    return CorpusReport(
        per_image=evaluations,
        sr=sum(e.success for e in scored) / len(scored),
        os_total=float(sum(e.os for e in scored)),
        bbr=sum(e.bb_adv for e in evaluations) / total_orig,
        app=float(sum(e.pixel_fraction for e in evaluations) / len(evaluations)),
        failures=tuple(failures),
    )
