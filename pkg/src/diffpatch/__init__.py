"""Sparse diffused-patch attacks on object detectors, with competition scoring."""
from .attack import (
    AttackConfig,
    AttackResult,
    HingeLoss,
    attack_loss,
    compose,
    count_positive,
    quantize_and_verify,
    run_attack,
)
from .detectors import DetectorAdapter, ProposalSet, TemplateDetector, get_detector, register_detector
from .ensemble import CorpusEntry, Portfolio, default_portfolio, run_campaign, run_portfolio
from .geometry import (
    BBox,
    Budget,
    PatchMask,
    PatchShapeSpec,
    check_budget,
    count_components,
    generate_asteroid_mask,
    generate_grid_mask,
    generate_mask,
    shrink_to_budget,
)
from .metrics import CorpusReport, ImageEvaluation, corpus_metrics, evaluate_image, overall_score

__version__ = "0.1.0"
