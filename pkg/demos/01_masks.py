"""
Diffused patch masks
====================

Asteroid and grid masks for a couple of boxes, their pixel and component
counts, and what the budget check says about them.
"""
import sys
from pathlib import Path

import numpy as np

from diffpatch import BBox, Budget, PatchShapeSpec, check_budget, generate_mask, shrink_to_budget
from diffpatch.io import save_mask_png

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-output") / "masks"

# two objects on a 500 x 500 canvas
boxes = [BBox(60, 80, 120, 90), BBox(300, 250, 101, 101)]

# every default shape, printed with its size and number of patches
for spec in [
    PatchShapeSpec("asteroid", scale=0.8),
    PatchShapeSpec("asteroid", scale=1.0),
    PatchShapeSpec("grid", lines=1),
    PatchShapeSpec("grid", lines=2),
    PatchShapeSpec("grid", lines=3),
    PatchShapeSpec("grid", lines=4),
]:
    mask = generate_mask(boxes, spec, (500, 500))
    report = check_budget(mask, Budget(), (500, 500))
    print(f"{spec.name:>13}: {mask.pixel_count:5d} px in {mask.num_components} patches, budget ok={report.ok}")
    save_mask_png(out / f"{spec.name}.png", mask)

# a one-pixel grid-2x2 on a 101 x 101 box is two rows plus two columns
thin = generate_mask([BBox(100, 100, 101, 101)], PatchShapeSpec("grid", lines=2, thickness=1), (500, 500))
print("grid-2x2, thickness 1:", thin.pixel_count, "px")

# a budget that is too tight makes the shape shrink: thinner lines first, then smaller
tight = Budget(max_pixel_fraction=0.004)
mask, used = shrink_to_budget(boxes, PatchShapeSpec("grid", lines=4, thickness=5), tight, (500, 500))
print("shrunk to", used.name, f"thickness {used.thickness} scale {used.scale:.1f} ->", mask.pixel_count, "px")

# the mask is a plain boolean array, so numpy does the rest
print("rows touched:", np.flatnonzero(mask.mask.any(axis=1)).size)
print("wrote", out)
