import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# fixed example sequences keep recorded runs reproducible
settings.register_profile("repeatable", derandomize=True)
settings.load_profile("repeatable")

from diffpatch.detectors import DetectorAdapter, ProposalSet, TemplateDetector  # noqa: E402


@pytest.fixture(scope="session")
def detector():
    return TemplateDetector()


class FixedGradientAdapter(DetectorAdapter):
    """Scores stay above threshold for ``positive_steps`` proposals, gradient is frozen."""

    name = "fixed"

    def __init__(self, gradient, score=0.9, positive_for=10**9):
        self.gradient = np.asarray(gradient, dtype=np.float64)
        self.score = score
        self.positive_for = positive_for
        self.calls = 0

    @property
    def class_count(self):
        return 1

    def propose(self, image):
        self.calls += 1
        s = self.score if self.calls <= self.positive_for else 0.0
        return ProposalSet.from_scores([[s]], source=self.name)

    def loss_gradient(self, image, loss):
        return self.gradient.copy()


class PixelDetector(DetectorAdapter):
    """One proposal whose score is the red value of pixel (0, 0) divided by 255."""

    name = "pixel"

    @property
    def class_count(self):
        return 1

    def propose(self, image):
        return ProposalSet.from_scores([[np.asarray(image)[0, 0, 0] / 255.0]], boxes=[[0, 0, 1, 1]])

    def loss_gradient(self, image, loss):
        props = self.propose(image)
        g = np.zeros(np.shape(image))
        g[0, 0, 0] = loss.grad(props.scores)[0, 0] / 255.0
        return g


@pytest.fixture
def fixed_adapter():
    return FixedGradientAdapter


@pytest.fixture
def pixel_detector():
    return PixelDetector()


ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail):
    """Remember a PASS/FAIL line; all lines are printed after the run."""
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
