"""Independent reference computations used to check the package.

Nothing here imports the code paths it checks.
"""
from collections import deque

import numpy as np


def flood_fill_components(mask):
    """Pure-Python BFS labelling under 8-connectivity: (count, sorted sizes)."""
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    seen = np.zeros_like(mask)
    sizes = []
    for r in range(height):
        for c in range(width):
            if not mask[r, c] or seen[r, c]:
                continue
            seen[r, c] = True
            queue = deque([(r, c)])
            size = 0
            while queue:
                y, x = queue.popleft()
                size += 1
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < height and 0 <= nx < width and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            sizes.append(size)
    return len(sizes), sorted(sizes)


def recount(mask):
    return int(sum(1 for v in np.asarray(mask, dtype=bool).ravel() if v))


def brute_force_nms(boxes, scores, threshold, iou_threshold=0.5):
    """Filter by max score then greedy NMS, written with plain loops."""
    items = []
    for i, (box, s) in enumerate(zip(boxes, scores)):
        best = max(s)
        if best > threshold:
            items.append((best, i, tuple(int(v) for v in box)))
    items.sort(key=lambda t: (-t[0], t[1]))
    kept = []
    for best, i, box in items:
        ok = True
        for _, _, other in kept:
            x0 = max(box[0], other[0])
            y0 = max(box[1], other[1])
            x1 = min(box[0] + box[2], other[0] + other[2])
            y1 = min(box[1] + box[3], other[1] + other[3])
            inter = max(0, x1 - x0) * max(0, y1 - y0)
            union = box[2] * box[3] + other[2] * other[3] - inter
            if inter / union > iou_threshold:
                ok = False
                break
        if ok:
            kept.append((best, i, box))
    return [box for _, _, box in kept]


def ncc_score(window, template, beta=10.0, gamma=5.0):
    """Score of one crop against one raw template, straight from the definition."""
    u = np.asarray(window, dtype=np.float64).ravel()
    u = u - u.mean()
    t = np.asarray(template, dtype=np.float64).ravel()
    t = t - t.mean()
    t = t / np.linalg.norm(t)
    n = np.linalg.norm(u)
    corr = 0.0 if n == 0 else float(u @ t / n)
    return 1.0 / (1.0 + np.exp(-(beta * corr - gamma))), corr


def os_formula(bb_orig, bb_adv, total_pixels):
    return (2 - total_pixels / 5000) * (1 - min(bb_orig, bb_adv) / bb_orig)
