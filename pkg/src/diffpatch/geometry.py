"""Rasterization of diffused patch masks and patch budget accounting.

Two families of thin, spread-out masks are supported, both anchored on the
centre of an object bounding box:

* asteroid: ``rays`` straight spokes from the box centre to the boundary of
  the (scaled) box, the first one pointing right;
* grid: ``lines`` horizontal and ``lines`` vertical full-span lines that cut
  the (scaled) box into equal strips.

Lines are drawn one pixel wide with a rounding DDA, dilated to the requested
thickness and clipped to the unscaled box and the image. Masks of several
boxes are unioned, and a "patch" is a connected domain of set pixels under
8-connectivity.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "BBox",
    "Budget",
    "BudgetReport",
    "BudgetUnsatisfiableError",
    "PatchKind",
    "PatchMask",
    "PatchShapeSpec",
    "check_budget",
    "count_components",
    "generate_asteroid_mask",
    "generate_grid_mask",
    "generate_mask",
    "mask_from_array",
    "shrink_to_budget",
]

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class BudgetUnsatisfiableError(ValueError):
    """No candidate mask on the shrink ladder fits the budget."""


class PatchKind(str, enum.Enum):
    ASTEROID = "asteroid"
    GRID = "grid"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box; ``x``/``y`` are the left column and top row in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise ValueError(f"BBox.{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.w < 1 or self.h < 1:
            raise ValueError(f"BBox width and height must be >= 1, got w={self.w}, h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        """(row, col) of the box centre; half-integral for even sizes."""
        return self.y + (self.h - 1) / 2.0, self.x + (self.w - 1) / 2.0

    def intersects(self, image_size: tuple[int, int]) -> bool:
        height, width = image_size
        return self.x < width and self.y < height and self.x + self.w > 0 and self.y + self.h > 0

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, data: dict) -> "BBox":
        return cls(x=data["x"], y=data["y"], w=data["w"], h=data["h"])


@dataclass(frozen=True)
class PatchShapeSpec:
    kind: PatchKind = PatchKind.GRID
    scale: float = 1.0
    rays: int = 8
    lines: int = 1
    thickness: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", PatchKind(self.kind))
        if not 0.0 < self.scale <= 1.0:
            raise ValueError(f"scale must lie in (0, 1], got {self.scale}")
        if self.thickness < 1:
            raise ValueError(f"thickness must be >= 1, got {self.thickness}")
        if self.kind is PatchKind.ASTEROID and self.rays < 2:
            raise ValueError(f"asteroid masks need at least 2 rays, got {self.rays}")
        if self.kind is PatchKind.GRID and self.lines < 1:
            raise ValueError(f"grid masks need at least 1 line, got {self.lines}")

    @property
    def name(self) -> str:
        """Short label such as ``asteroid-0.8`` or ``grid-3x3``."""
        if self.kind is PatchKind.ASTEROID:
            return f"asteroid-{self.scale:g}"
        return f"grid-{self.lines}x{self.lines}"

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "scale": self.scale, "thickness": self.thickness}
        if self.kind is PatchKind.ASTEROID:
            out["rays"] = self.rays
        else:
            out["lines"] = self.lines
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PatchShapeSpec":
        keys = ("kind", "scale", "rays", "lines", "thickness")
        return cls(**{k: data[k] for k in keys if k in data})


@dataclass(frozen=True)
class Budget:
    max_patches: int = 10
    max_pixel_fraction: float = 0.02

    def __post_init__(self):
        if self.max_patches < 1:
            raise ValueError("max_patches must be >= 1")
        if not 0.0 < self.max_pixel_fraction <= 1.0:
            raise ValueError("max_pixel_fraction must lie in (0, 1]")

    def pixel_limit(self, image_size: tuple[int, int]) -> int:
        height, width = image_size
        # the epsilon absorbs float noise such as 0.02 * 250000 = 5000.000...1
        return int(math.floor(self.max_pixel_fraction * height * width + 1e-9))

    def to_dict(self) -> dict:
        return {"max_patches": self.max_patches, "max_pixel_fraction": self.max_pixel_fraction}


@dataclass(frozen=True)
class BudgetReport:
    ok: bool
    patches_used: int
    pixels_used: int
    pixel_limit: int


@dataclass(frozen=True, eq=False)
class PatchMask:
    """Binary H x W mask together with its connected-domain accounting."""

    mask: np.ndarray
    num_components: int
    pixel_count: int
    per_component_counts: tuple[int, ...]
    spec: PatchShapeSpec | None = field(default=None)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def __eq__(self, other):
        if not isinstance(other, PatchMask):
            return NotImplemented
        return (
            np.array_equal(self.mask, other.mask)
            and self.per_component_counts == other.per_component_counts
            and self.spec == other.spec
        )

    __hash__ = None


def count_components(mask: np.ndarray) -> tuple[int, list[int]]:
    """Label 8-connected domains of set pixels.

    Returns the number of domains and their pixel counts in raster-scan order
    of each domain's first pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count == 0:
        return 0, []
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return int(count), [int(s) for s in sizes]


def mask_from_array(mask: np.ndarray, spec: PatchShapeSpec | None = None) -> PatchMask:
    mask = np.ascontiguousarray(mask, dtype=bool)
    num, counts = count_components(mask)
    return PatchMask(
        mask=mask,
        num_components=num,
        pixel_count=int(mask.sum()),
        per_component_counts=tuple(counts),
        spec=spec,
    )


def _round_half_up(values) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5).astype(np.int64)


def _draw_segment(canvas: np.ndarray, r0: float, c0: float, dr: float, dc: float) -> None:
    # Rounding DDA from (r0, c0) over integer offsets (dr, dc). Offsets are
    # rounded with np.rint, which is odd-symmetric, so antipodal segments are
    # exact mirrors of each other.
    steps = int(max(abs(dr), abs(dc)))
    i = np.arange(steps + 1)
    if steps == 0:
        rows, cols = np.array([0.0]), np.array([0.0])
    else:
        rows, cols = np.rint(i * dr / steps), np.rint(i * dc / steps)
    # Absolute coordinates round half-up: with the half-integral centre of an
    # even-sized box, np.rint would skip pixels. Clipping catches the one-past
    # overshoot the same centre can cause.
    rows = np.clip(_round_half_up(r0 + rows), 0, canvas.shape[0] - 1)
    cols = np.clip(_round_half_up(c0 + cols), 0, canvas.shape[1] - 1)
    canvas[rows, cols] = True


def _box_canvas(box: BBox) -> np.ndarray:
    return np.zeros((box.h, box.w), dtype=bool)


def _dilate(canvas: np.ndarray, thickness: int) -> np.ndarray:
    if thickness <= 1:
        return canvas
    # Square element with offsets -(k-1)//2 .. k//2; size k is contained in k+1.
    element = np.ones((thickness, thickness), dtype=bool)
    origin = (thickness - 1) // 2 - thickness // 2
    return ndimage.binary_dilation(canvas, structure=element, origin=(origin, origin))


def _half_extents(box: BBox, scale: float) -> tuple[float, float] | None:
    if scale * box.w < 1.0 or scale * box.h < 1.0:
        return None
    return scale * (box.h - 1) / 2.0, scale * (box.w - 1) / 2.0


def _asteroid_local(box: BBox, spec: PatchShapeSpec) -> tuple[np.ndarray, bool]:
    canvas = _box_canvas(box)
    cr, cc = (box.h - 1) / 2.0, (box.w - 1) / 2.0
    extents = _half_extents(box, spec.scale)
    if extents is None:
        canvas[int(math.floor(cr)), int(math.floor(cc))] = True
        return canvas, True
    ar, ac = extents
    for k in range(spec.rays):
        theta = 2.0 * math.pi * k / spec.rays
        dc, dr = math.cos(theta), -math.sin(theta)
        reach = math.inf
        if abs(dc) > 1e-12:
            reach = min(reach, ac / abs(dc))
        if abs(dr) > 1e-12:
            reach = min(reach, ar / abs(dr))
        end_r, end_c = float(np.rint(reach * dr)), float(np.rint(reach * dc))
        _draw_segment(canvas, cr, cc, end_r, end_c)
    return canvas, False


def _strip_offsets(half: float, lines: int) -> list[float]:
    # Centre-relative cuts splitting [-half, half] into lines+1 strips. The
    # integer numerator makes the k-th and (lines+1-k)-th cuts exact negatives.
    return [float(np.rint(half * (2 * k - lines - 1) / (lines + 1))) for k in range(1, lines + 1)]


def _grid_local(box: BBox, spec: PatchShapeSpec) -> tuple[np.ndarray, bool]:
    canvas = _box_canvas(box)
    cr, cc = (box.h - 1) / 2.0, (box.w - 1) / 2.0
    extents = _half_extents(box, spec.scale)
    if extents is None:
        canvas[int(math.floor(cr)), int(math.floor(cc))] = True
        return canvas, True
    ar, ac = float(np.rint(extents[0])), float(np.rint(extents[1]))
    r_lo, r_hi = (min(max(int(v), 0), box.h - 1) for v in _round_half_up([cr - ar, cr + ar]))
    c_lo, c_hi = (min(max(int(v), 0), box.w - 1) for v in _round_half_up([cc - ac, cc + ac]))
    # round the offset, not the absolute coordinate, to keep mirror symmetry
    for off in _strip_offsets(extents[0], spec.lines):
        row = min(max(int(_round_half_up(cr + off)), 0), box.h - 1)
        canvas[row, c_lo : c_hi + 1] = True
    for off in _strip_offsets(extents[1], spec.lines):
        col = min(max(int(_round_half_up(cc + off)), 0), box.w - 1)
        canvas[r_lo : r_hi + 1, col] = True
    return canvas, False


def _validate(bboxes: Sequence[BBox], image_size: tuple[int, int]) -> None:
    if len(bboxes) == 0:
        raise ValueError("at least one bounding box is required")
    height, width = image_size
    if height < 1 or width < 1:
        raise ValueError(f"invalid image size {image_size}")
    for box in bboxes:
        if not box.intersects(image_size):
            raise ValueError(f"{box} does not intersect an image of size {image_size}")
        r, c = box.center
        if not (0 <= r <= height - 1 and 0 <= c <= width - 1):
            raise ValueError(f"centre of {box} lies outside the image")


def _rasterize(bboxes: Iterable[BBox], spec: PatchShapeSpec, image_size, local_fn) -> PatchMask:
    bboxes = list(bboxes)
    _validate(bboxes, image_size)
    height, width = image_size
    out = np.zeros((height, width), dtype=bool)
    for box in bboxes:
        local, degenerate = local_fn(box, spec)
        if not degenerate:
            local = _dilate(local, spec.thickness)
        r0, c0 = max(box.y, 0), max(box.x, 0)
        r1, c1 = min(box.y + box.h, height), min(box.x + box.w, width)
        out[r0:r1, c0:c1] |= local[r0 - box.y : r1 - box.y, c0 - box.x : c1 - box.x]
    return mask_from_array(out, spec)


def generate_asteroid_mask(
    bboxes: Sequence[BBox], spec: PatchShapeSpec, image_size: tuple[int, int]
) -> PatchMask:
    """Union of asteroid (star of rays) masks centred on each box."""
    if spec.kind is not PatchKind.ASTEROID:
        raise ValueError(f"expected an asteroid spec, got {spec.kind.value}")
    return _rasterize(bboxes, spec, image_size, _asteroid_local)


def generate_grid_mask(
    bboxes: Sequence[BBox], spec: PatchShapeSpec, image_size: tuple[int, int]
) -> PatchMask:
    """Union of ``lines x lines`` grid masks centred on each box."""
    if spec.kind is not PatchKind.GRID:
        raise ValueError(f"expected a grid spec, got {spec.kind.value}")
    return _rasterize(bboxes, spec, image_size, _grid_local)


def generate_mask(bboxes: Sequence[BBox], spec: PatchShapeSpec, image_size: tuple[int, int]) -> PatchMask:
    if spec.kind is PatchKind.ASTEROID:
        return generate_asteroid_mask(bboxes, spec, image_size)
    return generate_grid_mask(bboxes, spec, image_size)


def check_budget(mask: PatchMask, budget: Budget, image_size: tuple[int, int]) -> BudgetReport:
    limit = budget.pixel_limit(image_size)
    ok = mask.num_components <= budget.max_patches and mask.pixel_count <= limit
    return BudgetReport(
        ok=bool(ok),
        patches_used=mask.num_components,
        pixels_used=mask.pixel_count,
        pixel_limit=limit,
    )


def _shrink_ladder(spec: PatchShapeSpec, min_scale: float = 0.3):
    yield spec
    for thickness in range(spec.thickness - 1, 0, -1):
        yield replace(spec, thickness=thickness)
    thin = replace(spec, thickness=1)
    step = 1
    while True:
        scale = round(spec.scale - 0.1 * step, 10)
        if scale < min_scale - 1e-9:
            break
        yield replace(thin, scale=scale)
        step += 1


def shrink_to_budget(
    bboxes: Sequence[BBox],
    spec: PatchShapeSpec,
    budget: Budget,
    image_size: tuple[int, int],
) -> tuple[PatchMask, PatchShapeSpec]:
    """Return the first budget-compliant mask on the shrink ladder.

    The ladder first thins the lines one pixel at a time down to 1, then
    shrinks the scale in steps of 0.1 down to 0.3.

    :raises BudgetUnsatisfiableError: if no rung complies.
    """
    last = None
    for candidate in _shrink_ladder(spec):
        mask = generate_mask(bboxes, candidate, image_size)
        report = check_budget(mask, budget, image_size)
        if report.ok:
            return mask, candidate
        last = report
    raise BudgetUnsatisfiableError(
        f"no {spec.name} mask fits the budget: last candidate used {last.patches_used} patches "
        f"(max {budget.max_patches}) and {last.pixels_used} pixels (max {last.pixel_limit})"
    )
