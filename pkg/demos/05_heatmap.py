"""
Where the loss gradient lives
=============================

Heatmaps of the hinge-loss gradient over a scene, at a few points along
an attack, and the share of gradient mass that falls inside the boxes.
"""
import sys
from pathlib import Path

import numpy as np

from diffpatch import AttackConfig, PatchShapeSpec, TemplateDetector
from diffpatch.heatmap import compute_heatmap, emit_heatmap_series, mass_inside
from diffpatch.synthetic import make_scene

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-output") / "heatmaps"

detector = TemplateDetector()
scene = make_scene(detector, 3, (256, 256), seed=8)

# with no mask the patch does nothing and this is the gradient of the clean image
empty = np.zeros(scene.image.shape[:2], bool)
art = compute_heatmap(detector, scene.image, empty, np.zeros_like(scene.image), 0.3)
print("mass inside boxes:", round(mass_inside(art.grid, scene.bboxes), 3))

# snapshots along a thin-grid attack; once nothing is detected the map goes flat
config = AttackConfig(shape=PatchShapeSpec("grid", lines=2, thickness=1))
series = emit_heatmap_series(detector, scene.image, scene.bboxes, config, [0, 10, 40, 120], out)
for tag, a in series.items():
    print(f"iteration {tag:>3}: total L1 {a.grid.sum():.4f} flat={a.flat}")
print("wrote", out)
