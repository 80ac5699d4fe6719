"""
The reference detector
======================

A template-correlation detector with a closed-form gradient. Plant two
objects in a scene, look at the proposals it scores, then compare its
gradient against a finite difference.
"""
import numpy as np

from diffpatch import HingeLoss, TemplateDetector
from diffpatch.synthetic import make_scene

detector = TemplateDetector()
print("window", detector.window, "stride", detector.stride, "classes", detector.class_count)

# a noisy gray scene with two planted templates
scene = make_scene(detector, 2, (128, 128), seed=4, noise=15)
print("planted boxes:", [b.to_dict() for b in scene.bboxes])

# every stride-aligned window is a proposal with one sigmoid score per class
proposals = detector.propose(scene.image)
print("proposals:", len(proposals.boxes), "best scores:", np.round(np.sort(proposals.scores.max(axis=1))[-3:], 4))

# detect keeps scores above the threshold and suppresses overlaps
print("detections:", detector.detect(scene.image, 0.3))

# gradient of sum(max(0, f - t)) with respect to each pixel
loss = HingeLoss(0.3)
grad = detector.loss_gradient(scene.image, loss)
print("nonzero gradient entries:", int(np.count_nonzero(grad)), "of", grad.size)

# central difference at one pixel inside the first object
b = scene.bboxes[0]
r, c, ch = b.y + 3, b.x + 5, 1
up, down = scene.image.copy(), scene.image.copy()
up[r, c, ch] += 0.5
down[r, c, ch] -= 0.5
fd = (loss.value(detector.propose(up).scores) - loss.value(detector.propose(down).scores)) / 1.0
print(f"analytic {grad[r, c, ch]:.6e} finite difference {fd:.6e}")
