"""
Scoring a corpus with the shape ensemble
========================================

Run every default shape on each image, keep the best overall score per
image, and compare the ensemble with each single shape.
"""
import sys
import tempfile
from pathlib import Path

from diffpatch import TemplateDetector
from diffpatch.ensemble import CorpusEntry, Portfolio, default_portfolio, run_campaign
from diffpatch.metrics import overall_score
from diffpatch.synthetic import make_corpus

# the score itself: fewer surviving boxes and fewer pixels is better
print("all boxes gone, 1200 px:", overall_score(4, 0, [600, 600]))
print("one of four left, 1200 px:", overall_score(4, 1, [600, 600]))
print("nothing removed:", overall_score(4, 4, [600, 600]))

detector = TemplateDetector()
scenes = make_corpus(detector, 8, size=(500, 500), objects=(1, 8), seed=3)
corpus = [CorpusEntry(s.image_id, image=s.image, bboxes=tuple(s.bboxes)) for s in scenes]

portfolio = default_portfolio()
checkpoints = Path(sys.argv[1]) / "checkpoints" if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "checkpoints"
report = run_campaign(detector, corpus, portfolio, checkpoint_dir=checkpoints)
print(f"\nensemble: SR {report.sr:.2f} OS {report.os_total:.3f} BBR {report.bbr:.3f} APP {report.app:.4%}")
for e in report.per_image:
    print(f"  {e.image_id}: {e.config_id:>13} os={e.os:.4f} pixels={e.perturbed_pixels}")

# each member alone never beats the ensemble
for config in portfolio.configs:
    single = run_campaign(detector, corpus, Portfolio((config,)))
    print(f"{config.name:>13}: OS {single.os_total:.3f}")

# running again with the same checkpoint directory reads the results back
again = run_campaign(detector, corpus, portfolio, checkpoint_dir=checkpoints)
print("\nresumed report identical:", again.to_json() == report.to_json())
print(report.to_csv())
