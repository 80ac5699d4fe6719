"""Command line entry point: ``diffpatch {attack,score,heatmap,mask-preview}``.

Every flag can also be given in a JSON or TOML file passed with
``--config``; keys are the flag names with dashes turned into underscores.
Flags on the command line win over the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig
from .detectors import detector_from_config
from .ensemble import CorpusEntry, Portfolio, default_portfolio, report_from_records, run_campaign
from .geometry import BBox, Budget, PatchShapeSpec, generate_mask
from .heatmap import emit_heatmap_series
from .io import (
    encode_rle,
    load_corpus,
    load_image,
    load_mask_png,
    save_image,
    save_mask_png,
    write_json,
)
from .metrics import ImageEvaluation, corpus_metrics, evaluate_image, make_evaluation

logger = logging.getLogger("diffpatch")

CAMPAIGN_FILE = "campaign.json"
FAILURES_FILE = "failures.json"

DEFAULTS = {
    "detector": "template",
    "detector_weights": None,
    "detector_threshold": 0.3,
    "shape": "ensemble",
    "scale": 1.0,
    "rays": 8,
    "lines": 3,
    "thickness": 3,
    "iterations": 200,
    "threshold": 0.3,
    "step": 2.0,
    "max_patches": 10,
    "max_pixel_fraction": 0.02,
    "workers": 1,
    "size": "500,500",
    "tags": "0,40,80,120",
}


class UsageError(Exception):
    pass


def _load_config_file(path: str) -> dict:
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    return {k.replace("-", "_"): v for k, v in data.items()}


def _parse_bbox(text: str) -> BBox:
    try:
        x, y, w, h = (int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"--bbox expects x,y,w,h integers, got {text!r}") from None
    return BBox(x, y, w, h)


def _parse_pair(text: str, flag: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"{flag} expects two comma-separated integers, got {text!r}") from None
    return a, b


def _add_detector_flags(p):
    p.add_argument("--detector", help="registered detector name (default: template)")
    p.add_argument("--detector-weights", help="weights file passed to the detector factory")
    p.add_argument("--detector-threshold", type=float, help="score threshold for counting boxes")


def _add_shape_flags(p, allow_ensemble: bool):
    choices = ["asteroid", "grid"] + (["ensemble"] if allow_ensemble else [])
    p.add_argument("--shape", choices=choices)
    p.add_argument("--scale", type=float)
    p.add_argument("--rays", type=int)
    p.add_argument("--lines", type=int)
    p.add_argument("--thickness", type=int)


def _add_attack_flags(p):
    p.add_argument("--iterations", type=int, help="maximum attack iterations")
    p.add_argument("--threshold", type=float, help="score threshold of the attacking loss")
    p.add_argument("--step", type=float, help="sign-gradient step in pixel values")
    p.add_argument("--max-patches", type=int)
    p.add_argument("--max-pixel-fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffpatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="attack every image of a manifest")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    _add_detector_flags(p)
    _add_shape_flags(p, allow_ensemble=True)
    _add_attack_flags(p)

    p = sub.add_parser("score", help="recompute report.json from files in an output directory")
    p.add_argument("--config")
    p.add_argument("--out")

    p = sub.add_parser("heatmap", help="write loss-gradient heatmaps along one attack")
    p.add_argument("--config")
    p.add_argument("--image")
    p.add_argument("--bbox", action="append", help="x,y,w,h; repeatable; default: clean detections")
    p.add_argument("--tags", help="comma-separated iterations, default 0,40,80,120")
    p.add_argument("--out")
    _add_detector_flags(p)
    _add_shape_flags(p, allow_ensemble=False)
    _add_attack_flags(p)

    p = sub.add_parser("mask-preview", help="render a mask without attacking")
    p.add_argument("--config")
    p.add_argument("--bbox", action="append", help="x,y,w,h; repeatable")
    p.add_argument("--size", help="H,W of the canvas (default 500,500)")
    p.add_argument("--out")
    _add_shape_flags(p, allow_ensemble=False)
    p.add_argument("--max-patches", type=int)
    p.add_argument("--max-pixel-fraction", type=float)
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        opts.update(_load_config_file(args.config))
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def _require(opts, *keys):
    for key in keys:
        if not opts.get(key):
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _shape(opts, kind=None) -> PatchShapeSpec:
    kind = kind or opts["shape"]
    return PatchShapeSpec(
        kind=kind, scale=opts["scale"], rays=opts["rays"], lines=opts["lines"], thickness=opts["thickness"]
    )


def _budget(opts) -> Budget:
    return Budget(max_patches=opts["max_patches"], max_pixel_fraction=opts["max_pixel_fraction"])


def _attack_config(opts, shape: PatchShapeSpec) -> AttackConfig:
    return AttackConfig(
        max_iterations=opts["iterations"],
        score_threshold=opts["threshold"],
        step=opts["step"],
        shape=shape,
        budget=_budget(opts),
    )


def _detector_section(opts) -> dict:
    section = {"name": opts["detector"], "score_threshold": opts["detector_threshold"]}
    if opts.get("detector_weights"):
        section["weights"] = str(Path(opts["detector_weights"]).resolve())
    return section


def _portfolio(opts) -> Portfolio:
    if opts["shape"] == "ensemble":
        template = _attack_config(opts, PatchShapeSpec())
        return default_portfolio(
            max_iterations=template.max_iterations,
            score_threshold=template.score_threshold,
            step=template.step,
            budget=template.budget,
        )
    return Portfolio((_attack_config(opts, _shape(opts)),))


def _write_outputs(out: Path):
    def on_result(entry, image, outcome, record):
        sidecar = {"id": entry.image_id, "config_id": record["config_id"], "evaluation": record["evaluation"]}
        if outcome is not None:
            save_image(out / "adversarial" / f"{entry.image_id}.png", outcome.result.adversarial)
            save_mask_png(out / "masks" / f"{entry.image_id}.png", outcome.result.final_mask)
            write_json(out / "masks" / f"{entry.image_id}.rle.json", encode_rle(outcome.result.final_mask))
            sidecar.update(outcome.result.summary())
        write_json(out / "sidecars" / f"{entry.image_id}.json", sidecar)

    return on_result


def cmd_attack(opts) -> int:
    _require(opts, "manifest", "out")
    out = Path(opts["out"])
    manifest = load_corpus(opts["manifest"])
    section = _detector_section(opts)
    detector, det_threshold = detector_from_config(section)
    portfolio = _portfolio(opts)
    campaign = {
        "manifest": str(Path(opts["manifest"]).resolve()),
        "detector": section,
        "portfolio": portfolio.to_dict(),
        "workers": opts["workers"],
    }
    write_json(out / CAMPAIGN_FILE, campaign)
    corpus = [CorpusEntry(image_id=e.image_id, path=str(e.path), bboxes=e.bboxes) for e in manifest.entries]
    if not corpus:
        raise UsageError("manifest lists no images")
    for image_id in manifest.nonconforming():
        logger.warning("%s is not %dx%d; scores use a scaled pixel limit", image_id, *manifest.expected_size)
    report = run_campaign(
        detector,
        corpus,
        portfolio,
        opts["workers"],
        score_threshold=det_threshold,
        checkpoint_dir=out / "checkpoints",
        on_result=_write_outputs(out),
    )
    write_json(out / FAILURES_FILE, list(report.failures))
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(json.dumps({"command": "attack", "report": str(out / "report.json"), **report.to_dict()["summary"]}, sort_keys=True))
    return 0


def cmd_score(opts) -> int:
    _require(opts, "out")
    out = Path(opts["out"])
    with open(out / CAMPAIGN_FILE, encoding="utf-8") as fh:
        campaign = json.load(fh)
    detector, det_threshold = detector_from_config(campaign["detector"])
    manifest = load_corpus(campaign["manifest"])
    failures_path = out / FAILURES_FILE
    failures = json.loads(failures_path.read_text(encoding="utf-8")) if failures_path.exists() else []
    failed = {f["id"] for f in failures}
    evaluations: list[ImageEvaluation] = []
    for entry in manifest.entries:
        if entry.image_id in failed:
            continue
        sidecar_path = out / "sidecars" / f"{entry.image_id}.json"
        if not sidecar_path.exists():
            failures.append({"id": entry.image_id, "error": "no attack output found"})
            continue
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        original = load_image(entry.path)
        adv_path = out / "adversarial" / f"{entry.image_id}.png"
        if adv_path.exists():
            adversarial = load_image(adv_path)
            mask = load_mask_png(out / "masks" / f"{entry.image_id}.png")
            evaluations.append(
                evaluate_image(
                    detector, original, adversarial, mask, det_threshold,
                    image_id=entry.image_id, config_id=sidecar.get("config_id"),
                )
            )
        else:
            bb = len(detector.detect(original, det_threshold))
            evaluations.append(make_evaluation(bb, bb, (), original.shape[:2], entry.image_id))
    if not evaluations:
        raise RuntimeError(f"nothing to score under {out}")
    report = corpus_metrics(evaluations, failures)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(json.dumps({"command": "score", "report": str(out / "report.json"), **report.to_dict()["summary"]}, sort_keys=True))
    return 0


def cmd_heatmap(opts) -> int:
    _require(opts, "image", "out")
    if opts["shape"] == "ensemble":
        opts["shape"] = "grid"
    detector, det_threshold = detector_from_config(_detector_section(opts))
    image = load_image(opts["image"])
    if opts.get("bbox"):
        bboxes = [_parse_bbox(b) for b in opts["bbox"]]
    else:
        bboxes = detector.detect(image, det_threshold)
    if not bboxes:
        raise RuntimeError("no boxes given and the detector finds nothing on the image")
    tags = [int(t) for t in str(opts["tags"]).split(",") if t.strip()]
    emit_heatmap_series(detector, image, bboxes, _attack_config(opts, _shape(opts)), tags, opts["out"])
    print(json.dumps({"command": "heatmap", "out": str(opts["out"]), "tags": tags}))
    return 0


def cmd_mask_preview(opts) -> int:
    _require(opts, "bbox")
    if opts["shape"] == "ensemble":
        opts["shape"] = "grid"
    size = _parse_pair(opts["size"], "--size")
    bboxes = [_parse_bbox(b) for b in opts["bbox"]]
    spec = _shape(opts)
    mask = generate_mask(bboxes, spec, size)
    from .geometry import check_budget

    budget = check_budget(mask, _budget(opts), size)
    summary = {
        "command": "mask-preview",
        "spec": spec.to_dict(),
        "pixel_count": mask.pixel_count,
        "num_components": mask.num_components,
        "per_component_counts": list(mask.per_component_counts),
        "budget_ok": budget.ok,
        "pixel_limit": budget.pixel_limit,
    }
    if opts.get("out"):
        out = Path(opts["out"])
        save_mask_png(out / "mask.png", mask)
        write_json(out / "mask.json", {**summary, "rle": encode_rle(mask)})
    print(json.dumps(summary, sort_keys=True))
    return 0


COMMANDS = {
    "attack": cmd_attack,
    "score": cmd_score,
    "heatmap": cmd_heatmap,
    "mask-preview": cmd_mask_preview,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = _resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": str(exc), "type": "usage"}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        logger.debug("command failed", exc_info=True)
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
