"""
Masked sign-gradient attack
===========================

Attack one scene with a thin grid mask and watch the number of
above-threshold proposals fall, then quantize to 8 bits and check again.
"""
import sys
from pathlib import Path

from diffpatch import AttackConfig, PatchShapeSpec, TemplateDetector, quantize_and_verify, run_attack
from diffpatch.io import save_image
from diffpatch.synthetic import make_scene

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-output") / "attack"

detector = TemplateDetector()
scene = make_scene(detector, 4, (256, 256), seed=11)

# one-pixel lines leave most of each object intact, so the loop has work to do
config = AttackConfig(max_iterations=200, score_threshold=0.3, step=2.0,
                      shape=PatchShapeSpec("grid", lines=2, thickness=1))
result = run_attack(detector, scene.image, scene.bboxes, config)

print("iterations:", result.iterations_used, "success:", result.success)
print("positive proposals:", result.positive_counts[:5], "...", result.positive_counts[-3:])
print("loss:", [round(v, 3) for v in result.loss_trace[:3]], "...")
print("mask:", result.final_mask.pixel_count, "px in", result.final_mask.num_components, "patches")

# the image that gets written is 8-bit, so it is re-checked after rounding
final = quantize_and_verify(result, detector)
print("after quantization success:", final.success)

save_image(out / "original.png", scene.image)
save_image(out / "adversarial.png", final.adversarial)
print("wrote", out)

# the default three-pixel grid blacks out enough of each object that
# nothing survives the first check and no iteration is needed
thick = run_attack(detector, scene.image, scene.bboxes, AttackConfig(shape=PatchShapeSpec("grid", lines=2)))
print("thickness 3: iterations", thick.iterations_used, "success", thick.success)
