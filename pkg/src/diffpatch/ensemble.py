"""Per-image portfolio attacks and corpus-wide campaigns with checkpointing."""
from __future__ import annotations

import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .attack import AttackConfig, AttackResult, quantize_and_verify, run_attack
from .detectors import DetectorAdapter
from .geometry import BBox, PatchShapeSpec
from .metrics import CorpusReport, ImageEvaluation, corpus_metrics, evaluate_image

__all__ = [
    "CampaignState",
    "CorpusEntry",
    "Portfolio",
    "PortfolioOutcome",
    "default_portfolio",
    "run_campaign",
    "run_portfolio",
]

logger = logging.getLogger(__name__)

DEFAULT_SHAPES = (
    PatchShapeSpec(kind="asteroid", scale=0.8),
    PatchShapeSpec(kind="asteroid", scale=1.0),
    PatchShapeSpec(kind="grid", lines=1),
    PatchShapeSpec(kind="grid", lines=2),
    PatchShapeSpec(kind="grid", lines=3),
    PatchShapeSpec(kind="grid", lines=4),
)


@dataclass(frozen=True)
class Portfolio:
    configs: tuple[AttackConfig, ...]

    def __post_init__(self):
        object.__setattr__(self, "configs", tuple(self.configs))
        if not self.configs:
            raise ValueError("a portfolio needs at least one attack config")

    @property
    def ids(self) -> list[str]:
        return [c.name for c in self.configs]

    def to_dict(self) -> dict:
        return {"configs": [c.to_dict() for c in self.configs]}

    @classmethod
    def from_dict(cls, data: dict) -> "Portfolio":
        return cls(tuple(AttackConfig.from_dict(c) for c in data["configs"]))


def default_portfolio(**overrides) -> Portfolio:
    """asteroid-0.8, asteroid-1.0 and grid-1x1 .. grid-4x4 sharing ``overrides``."""
    return Portfolio(tuple(AttackConfig(shape=s, **overrides) for s in DEFAULT_SHAPES))


class PortfolioOutcome(NamedTuple):
    result: AttackResult
    config_id: str
    evaluation: ImageEvaluation
    member_scores: dict


def run_portfolio(
    detector: DetectorAdapter,
    image: np.ndarray,
    bboxes: Sequence[BBox],
    portfolio: Portfolio,
    *,
    score_threshold: float | None = None,
    image_id: str = "",
) -> PortfolioOutcome:
    """Attack with every config and keep the one with the best overall score.

    Each member is quantized to 8 bits and scored on the quantized image.
    Ties go to the earliest config. A config that raises is skipped; the
    image fails only if every config does.
    """
    image = np.asarray(image, dtype=np.float64)
    best: PortfolioOutcome | None = None
    scores: dict = {}
    errors = []
    for config in portfolio.configs:
        threshold = config.score_threshold if score_threshold is None else score_threshold
        try:
            result = quantize_and_verify(run_attack(detector, image, bboxes, config), detector, config)
            evaluation = evaluate_image(
                detector, image, result.adversarial, result.final_mask, threshold,
                image_id=image_id, config_id=config.name,
            )
        except Exception as exc:  # noqa: BLE001 - one bad config must not sink the image
            logger.warning("%s: config %s failed: %s", image_id or "image", config.name, exc)
            errors.append(f"{config.name}: {exc}")
            scores[config.name] = None
            continue
        scores[config.name] = evaluation.os
        if best is None or evaluation.os > best.evaluation.os:
            best = PortfolioOutcome(result, config.name, evaluation, scores)
    if best is None:
        raise RuntimeError("every portfolio config failed: " + "; ".join(errors))
    return best._replace(member_scores=scores)


@dataclass
class CorpusEntry:
    """One image of a campaign; ``bboxes=None`` means use the clean detections."""

    image_id: str
    image: np.ndarray | None = None
    path: str | None = None
    bboxes: tuple[BBox, ...] | None = None
    loader: Callable[[str], np.ndarray] | None = field(default=None, repr=False)

    def load(self) -> np.ndarray:
        if self.image is not None:
            return np.asarray(self.image, dtype=np.float64)
        if self.path is None:
            raise ValueError(f"entry {self.image_id!r} has neither pixels nor a path")
        if self.loader is None:
            from .io import load_image

            return load_image(self.path)
        return self.loader(self.path)


@dataclass
class CampaignState:
    """Per-image progress; completed images are checkpointed as JSON."""

    checkpoint_dir: Path | None = None
    status: dict = field(default_factory=dict)
    retained: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def checkpoint_path(self, image_id: str) -> Path | None:
        if self.checkpoint_dir is None:
            return None
        return self.checkpoint_dir / f"{image_id}.json"

    def load(self, image_id: str) -> dict | None:
        path = self.checkpoint_path(image_id)
        if path is None or not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            record = json.load(fh)
        with self._lock:
            self.status[image_id] = "done"
            self.retained[image_id] = record
        return record

    def mark_running(self, image_id: str) -> None:
        with self._lock:
            self.status[image_id] = "running"

    def complete(self, image_id: str, record: dict) -> None:
        with self._lock:
            path = self.checkpoint_path(image_id)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".json.tmp")
                tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
                os.replace(tmp, path)
            self.status[image_id] = "done"
            self.retained[image_id] = record


def _attack_entry(detector, entry: CorpusEntry, portfolio, score_threshold, on_result):
    image = entry.load()
    bboxes = entry.bboxes
    if bboxes is None:
        bboxes = tuple(detector.detect(image, score_threshold))
    if not bboxes:
        chosen = None
        evaluation = evaluate_image(detector, image, image, _empty_mask(image), score_threshold, image_id=entry.image_id)
        record = {"id": entry.image_id, "config_id": None, "evaluation": evaluation.to_dict(), "attack": None}
    else:
        chosen = run_portfolio(detector, image, bboxes, portfolio, score_threshold=score_threshold, image_id=entry.image_id)
        record = {
            "id": entry.image_id,
            "config_id": chosen.config_id,
            "bboxes": [b.to_dict() for b in bboxes],
            "member_os": chosen.member_scores,
            "evaluation": chosen.evaluation.to_dict(),
            "attack": chosen.result.summary(),
        }
    if on_result is not None:
        on_result(entry, image, chosen, record)
    return record


def _empty_mask(image):
    from .geometry import mask_from_array

    return mask_from_array(np.zeros(np.shape(image)[:2], dtype=bool))


def run_campaign(
    detector: DetectorAdapter,
    corpus: Sequence[CorpusEntry],
    portfolio: Portfolio,
    parallelism: int = 1,
    *,
    score_threshold: float = 0.3,
    checkpoint_dir: str | os.PathLike | None = None,
    on_result: Callable | None = None,
) -> CorpusReport:
    """Attack every image with the portfolio and aggregate the retained results.

    Images already checkpointed in ``checkpoint_dir`` are not attacked
    again. ``on_result(entry, image, outcome, record)`` runs under a lock
    once per freshly attacked image, before its checkpoint is written.
    Results are reported in corpus order regardless of ``parallelism``.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("campaign corpus is empty")
    ids = [e.image_id for e in corpus]
    if len(set(ids)) != len(ids):
        raise ValueError("campaign image ids must be unique")
    state = CampaignState(Path(checkpoint_dir) if checkpoint_dir is not None else None)
    if not getattr(detector, "concurrent_safe", True):
        parallelism = 1
    write_lock = threading.Lock()

    def locked_callback(*args):
        with write_lock:
            on_result(*args)

    def work(entry: CorpusEntry):
        record = state.load(entry.image_id)
        if record is not None:
            return record
        state.mark_running(entry.image_id)
        try:
            record = _attack_entry(
                detector, entry, portfolio, score_threshold, locked_callback if on_result else None
            )
        except Exception as exc:  # noqa: BLE001 - recorded as a failure row
            logger.error("%s: %s", entry.image_id, exc)
            # not checkpointed, so a resumed campaign retries the image
            with state._lock:
                state.status[entry.image_id] = "failed"
            return {"id": entry.image_id, "failed": True, "error": f"{type(exc).__name__}: {exc}"}
        state.complete(entry.image_id, record)
        return record

    if parallelism <= 1:
        records = [work(e) for e in corpus]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(work, corpus))
    return report_from_records(records)


def report_from_records(records: Sequence[dict]) -> CorpusReport:
    evaluations = [ImageEvaluation.from_dict(r["evaluation"]) for r in records if not r.get("failed")]
    failures = [{"id": r["id"], "error": r["error"]} for r in records if r.get("failed")]
    if not evaluations:
        raise RuntimeError("no image of the campaign could be evaluated")
    return corpus_metrics(evaluations, failures)
