"""File formats: PNG images and masks, run-length masks, corpus manifests, sidecars."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import BBox, PatchMask, mask_from_array

__all__ = [
    "CorpusManifest",
    "ManifestEntry",
    "ManifestError",
    "decode_rle",
    "encode_rle",
    "load_corpus",
    "load_image",
    "load_mask_png",
    "save_image",
    "save_mask_png",
    "write_json",
]


class ManifestError(ValueError):
    pass


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an image as an ``H x W x 3`` float array of 8-bit values."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64)


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a lossless 8-bit RGB PNG; values must already be integral."""
    image = np.asarray(image)
    if not np.array_equal(image, np.rint(image)) or image.min() < 0 or image.max() > 255:
        raise ValueError("image must hold integral values in [0, 255] before it is written")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.astype(np.uint8), mode="RGB").save(path, format="PNG")


def save_mask_png(path: str | os.PathLike, mask: PatchMask | np.ndarray) -> None:
    bits = mask.mask if isinstance(mask, PatchMask) else np.asarray(mask, dtype=bool)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(bits).convert("1").save(path, format="PNG")


def load_mask_png(path: str | os.PathLike) -> PatchMask:
    with Image.open(path) as im:
        return mask_from_array(np.asarray(im.convert("1"), dtype=bool))


def encode_rle(mask: PatchMask | np.ndarray) -> dict:
    """Row-major run lengths, alternating unset/set and starting with unset."""
    bits = mask.mask if isinstance(mask, PatchMask) else np.asarray(mask, dtype=bool)
    flat = bits.ravel().astype(np.int8)
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"H": int(bits.shape[0]), "W": int(bits.shape[1]), "runs": [int(r) for r in runs]}


def decode_rle(data: dict) -> np.ndarray:
    height, width = int(data["H"]), int(data["W"])
    runs = np.asarray(data["runs"], dtype=np.int64)
    if runs.sum() != height * width:
        raise ValueError(f"runs cover {runs.sum()} pixels, expected {height * width}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


def write_json(path: str | os.PathLike, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: Path
    bboxes: tuple[BBox, ...] | None

    @property
    def derive_boxes(self) -> bool:
        """True when boxes must come from the detector's clean detections."""
        return self.bboxes is None


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[ManifestEntry, ...]
    source: Path | None = None
    expected_size: tuple[int, int] = (500, 500)

    def __len__(self):
        return len(self.entries)

    def nonconforming(self) -> list[str]:
        """Ids of images whose size differs from ``expected_size``."""
        bad = []
        for entry in self.entries:
            with Image.open(entry.path) as im:
                if (im.height, im.width) != self.expected_size:
                    bad.append(entry.image_id)
        return bad


def _parse_bbox(raw, where: str) -> BBox:
    try:
        if isinstance(raw, dict):
            values = [raw[k] for k in ("x", "y", "w", "h")]
        else:
            values = list(raw)
            if len(values) != 4:
                raise ValueError("expected four numbers")
        if any(isinstance(v, bool) or not isinstance(v, int) for v in values):
            raise ValueError("coordinates must be integers")
        return BBox(*values)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: invalid bbox {raw!r}: {exc}") from None


def load_corpus(manifest_path: str | os.PathLike) -> CorpusManifest:
    """Parse a JSON list of ``{"id", "image", "bboxes"?}`` entries.

    Image paths are resolved relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: malformed JSON: {exc}") from None
    if isinstance(raw, dict) and "images" in raw:
        raw = raw["images"]
    if not isinstance(raw, list):
        raise ManifestError(f"{manifest_path}: expected a list of image entries")
    base = manifest_path.parent
    seen: set[str] = set()
    entries = []
    for index, item in enumerate(raw):
        where = f"{manifest_path} entry {index}"
        if not isinstance(item, dict) or "id" not in item or "image" not in item:
            raise ManifestError(f"{where}: needs 'id' and 'image' fields")
        image_id = str(item["id"])
        where = f"{manifest_path} entry {image_id!r}"
        if image_id in seen:
            raise ManifestError(f"{where}: duplicate id")
        seen.add(image_id)
        path = Path(item["image"])
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ManifestError(f"{where}: image file {path} does not exist")
        boxes = item.get("bboxes")
        if boxes is not None:
            boxes = tuple(_parse_bbox(b, where) for b in boxes)
        entries.append(ManifestEntry(image_id=image_id, path=path, bboxes=boxes))
    return CorpusManifest(entries=tuple(entries), source=manifest_path)


def write_manifest(path: str | os.PathLike, items: Sequence[dict]) -> None:
    write_json(path, list(items))
